use eeglm_core::config::RunConfig;
use eeglm_core::lm::{LanguageModel, MergedVocab};
use eeglm_core::pipeline;
use eeglm_core::tokenizer::{Tokenizer, TokenizerTrainer};

#[test]
fn calibrate_overfit() {
    for (dead, lr, dec) in [(10u64, 1.5e-3f64, 3usize), (10, 2e-3, 2), (10, 2e-3, 3)] {
        let mut cfg = RunConfig::default();
        cfg.synth_train_per_class = 32;
        cfg.synth_val_per_class = 0;
        cfg.synth_test_per_class = 0;
        cfg.tok_steps = 500;
        cfg.tok_dead_code_steps = dead;
        cfg.tok_peak_lr = lr;
        cfg.tok_decoder_layers = dec;
        cfg.tok_min_lr = lr / 5.0;
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw");
        let proc = dir.path().join("proc");
        std::fs::create_dir_all(&raw).unwrap();
        std::fs::create_dir_all(&proc).unwrap();
        pipeline::synth_to_dir(&cfg, &raw).unwrap();
        pipeline::preprocess_dir(&cfg, &raw, &proc).unwrap();
        let windows = pipeline::load_windows(&cfg, &proc, "train").unwrap();
        let samples: Vec<_> = windows.into_iter().map(|w| w.sample).collect();
        assert_eq!(samples.len(), 64);

        let tok = Tokenizer::<f32>::init(cfg.tokenizer_config(), cfg.seed).unwrap();
        let lm = LanguageModel::<f32>::init(
            cfg.lm_config(), MergedVocab::byte_level(cfg.tok_codebook).unwrap(), cfg.tok_hidden, cfg.seed,
        ).unwrap();
        let mut trainer = TokenizerTrainer::new(tok, lm.text_embedding_table(), cfg.tokenizer_train_options(500)).unwrap();
        let t0 = std::time::Instant::now();
        trainer.run(&samples, |_| {}).unwrap();
        let (mse, var) = trainer.reconstruction_mse(&samples).unwrap();
        println!("dead={dead} lr={lr} dec={dec}: mse {mse:.4} var {var:.4} ratio {:.4} ({:.1?})", mse / var, t0.elapsed());
    }
}
