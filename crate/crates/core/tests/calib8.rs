use eeglm_core::config::RunConfig;
use eeglm_core::lm::{LanguageModel, MergedVocab};
use eeglm_core::pipeline;
use eeglm_core::tensor::Tensor;
use eeglm_core::tokenizer::{probe_discrimination_accuracy, sample_text_rows, Tokenizer, TokenizerTrainer};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn calibrate_alignment_probe() {
    let mut cfg = RunConfig::default();
    cfg.synth_train_per_class = 24;
    cfg.synth_val_per_class = 8;
    cfg.synth_test_per_class = 0;
    cfg.tok_steps = 1500;
    cfg.tok_text_batch = 32;
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    let proc = dir.path().join("proc");
    std::fs::create_dir_all(&raw).unwrap();
    std::fs::create_dir_all(&proc).unwrap();
    pipeline::synth_to_dir(&cfg, &raw).unwrap();
    pipeline::preprocess_dir(&cfg, &raw, &proc).unwrap();
    let train: Vec<_> = pipeline::load_windows(&cfg, &proc, "train").unwrap().into_iter().map(|w| w.sample).collect();
    let val: Vec<_> = pipeline::load_windows(&cfg, &proc, "val").unwrap().into_iter().map(|w| w.sample).collect();

    let lm = LanguageModel::<f32>::init(cfg.lm_config(), MergedVocab::byte_level(cfg.tok_codebook).unwrap(), cfg.tok_hidden, cfg.seed).unwrap();
    let table = lm.text_embedding_table();

    let mut accs = Vec::new();
    for align in [true, false] {
        let tok = Tokenizer::<f32>::init(cfg.tokenizer_config(), cfg.seed).unwrap();
        let mut opts = cfg.tokenizer_train_options(1500);
        opts.align = align;
        let mut trainer = TokenizerTrainer::new(tok, table.clone(), opts).unwrap();
        let t0 = std::time::Instant::now();
        trainer.run(&train, |_| {}).unwrap();
        // held-out embeddings
        let mut rows: Vec<f32> = Vec::new();
        let mut n_rows = 0;
        for s in &val {
            let (h, _) = trainer.tokenizer.encode_sample(s).unwrap();
            n_rows += h.shape()[0];
            rows.extend_from_slice(h.data());
        }
        let eeg = Tensor::new(vec![n_rows, cfg.tok_hidden], rows).unwrap();
        let hnorm: f64 = (0..n_rows).map(|r| eeg.row(r).iter().map(|&v| (v as f64)*(v as f64)).sum::<f64>().sqrt()).sum::<f64>() / n_rows as f64;
        let tnorm: f64 = (0..table.shape()[0]).map(|r| table.row(r).iter().map(|&v| (v as f64)*(v as f64)).sum::<f64>().sqrt()).sum::<f64>() / table.shape()[0] as f64;
        println!("align={align}: mean h norm {hnorm:.4} text norm {tnorm:.4}");
        let mut rng = ChaCha8Rng::seed_from_u64(999);
        let text = sample_text_rows(&table, n_rows.min(table.shape()[0]), &mut rng).unwrap();
        let acc = probe_discrimination_accuracy(&eeg, &text, 7, 400).unwrap();
        println!("align={align}: probe acc {acc:.4} ({:.1?})", t0.elapsed());
        accs.push(acc);
    }
    println!("aligned {} vs unaligned {}", accs[0], accs[1]);
}
