//! The neural tokenizer: a temporal convolution stack and transformer
//! encoder producing patch embeddings, a cosine-similarity codebook
//! lookup, and twin decoders reconstructing the temporal waveform and the
//! frequency magnitudes through a straight-through estimator.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::registry;
use crate::nn::{self, Bound, ParamSet, StackConfig};
use crate::signal::PatchGrid;
use crate::tensor::{lit, Result, Scalar, Tape, Tensor, TensorError, Var};

use super::dft::FreqTarget;

/// Temporal-convolution geometry: three 1-D conv blocks.
pub const CONV_IN: [usize; 3] = [1, 16, 16];
pub const CONV_OUT: [usize; 3] = [16, 16, 16];
pub const CONV_KERNEL: [usize; 3] = [15, 3, 3];
pub const CONV_STRIDE: [usize; 3] = [8, 1, 1];
pub const CONV_PADDING: [usize; 3] = [7, 1, 1];

/// Output length of the conv stack for a patch of `p` samples.
pub fn conv_feature_len(p: usize) -> usize {
    let mut len = p;
    for i in 0..3 {
        len = (len + 2 * CONV_PADDING[i] - CONV_KERNEL[i]) / CONV_STRIDE[i] + 1;
    }
    len
}

/// Which reconstruction heads contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reconstruct {
    Temporal,
    Frequency,
    Both,
}

impl std::str::FromStr for Reconstruct {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "temporal" => Ok(Reconstruct::Temporal),
            "frequency" => Ok(Reconstruct::Frequency),
            "both" => Ok(Reconstruct::Both),
            other => Err(format!("reconstruct must be temporal|frequency|both, got {other:?}")),
        }
    }
}

impl std::fmt::Display for Reconstruct {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Reconstruct::Temporal => "temporal",
            Reconstruct::Frequency => "frequency",
            Reconstruct::Both => "both",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct TokenizerConfig {
    pub patch_len: usize,
    pub encoder: StackConfig,
    pub decoder: StackConfig,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub max_patches: usize,
    /// Commitment weight β.
    pub beta: f64,
    pub reconstruct: Reconstruct,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            patch_len: 200,
            encoder: StackConfig { layers: 2, hidden: 64, heads: 4, mlp: 256 },
            decoder: StackConfig { layers: 2, hidden: 64, heads: 4, mlp: 256 },
            codebook_size: 256,
            code_dim: 32,
            max_patches: 1024,
            beta: 1.0,
            reconstruct: Reconstruct::Both,
        }
    }
}

impl TokenizerConfig {
    /// Shape parity with the published full-scale table.
    pub fn full() -> Self {
        TokenizerConfig {
            patch_len: 200,
            encoder: StackConfig { layers: 12, hidden: 768, heads: 12, mlp: 3072 },
            decoder: StackConfig { layers: 3, hidden: 768, heads: 12, mlp: 3072 },
            codebook_size: 8192,
            code_dim: 128,
            max_patches: 1024,
            beta: 1.0,
            reconstruct: Reconstruct::Both,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.patch_len == 0 || self.patch_len % 2 != 0 {
            return Err(TensorError::InvalidArg {
                op: "tokenizer_config",
                detail: format!("patch_len {} must be even", self.patch_len),
            });
        }
        if self.codebook_size == 0 || self.code_dim == 0 {
            return Err(TensorError::InvalidArg {
                op: "tokenizer_config",
                detail: "codebook must be non-empty".into(),
            });
        }
        if self.beta < 0.0 {
            return Err(TensorError::InvalidArg {
                op: "tokenizer_config",
                detail: format!("beta {} must be >= 0", self.beta),
            });
        }
        Ok(())
    }

    pub fn flat_features(&self) -> usize {
        CONV_OUT[2] * conv_feature_len(self.patch_len)
    }
}

/// Codebook indices of one sample, `[C, N]` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub n_channels: usize,
    pub n_patches: usize,
    pub indices: Vec<u32>,
}

impl TokenGrid {
    pub fn index(&self, c: usize, j: usize) -> u32 {
        self.indices[c * self.n_patches + j]
    }
}

/// Patch rows of one sample prepared for the encoder: resolved registry
/// channel ids plus the frequency reconstruction target.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub grid: PatchGrid,
    pub channel_ids: Vec<u16>,
    pub freq: FreqTarget,
}

impl PreparedSample {
    pub fn new(grid: PatchGrid, channel_names: &[String]) -> Result<Self> {
        let mut channel_ids = Vec::with_capacity(channel_names.len());
        for name in channel_names {
            let id = registry::channel_id(name).ok_or_else(|| TensorError::InvalidArg {
                op: "encode_patches",
                detail: format!("unknown channel {name:?}"),
            })?;
            channel_ids.push(id);
        }
        let freq = super::dft::freq_target(&grid)?;
        Ok(PreparedSample { grid, channel_ids, freq })
    }

    pub fn n_rows(&self) -> usize {
        self.grid.n_channels * self.grid.n_patches
    }
}

/// All loss terms of one sample, still on the tape.
pub struct TokenizerLoss {
    pub total: Var,
    pub temporal: Var,
    pub frequency: Var,
    pub codebook: Var,
    pub commitment: Var,
    /// Encoder patch embeddings `[C*N, hidden]`, the adversarial input.
    pub embeddings: Var,
    /// Normalized code-space embeddings `[C*N, code_dim]`.
    pub normalized_codes: Var,
    pub tokens: TokenGrid,
}

#[derive(Debug, Clone)]
pub struct Tokenizer<S> {
    pub cfg: TokenizerConfig,
    pub params: ParamSet<S>,
}

impl<S: Scalar> Tokenizer<S> {
    pub fn init(cfg: TokenizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        // feature-extraction layers use fan-in scaling: with the global
        // 0.02 init the three stacked convs attenuate patch content below
        // the position embeddings and the quantizer keys on position alone
        for i in 0..3 {
            let fan_in = CONV_IN[i] * CONV_KERNEL[i];
            let std = (2.0 / fan_in as f64).sqrt();
            ps.insert(
                format!("conv{i}.w"),
                Tensor::randn(&[CONV_OUT[i], CONV_IN[i], CONV_KERNEL[i]], std, &mut rng),
            );
            ps.insert(format!("conv{i}.b"), Tensor::zeros(&[CONV_OUT[i]]));
        }
        let d = cfg.encoder.hidden;
        let proj_std = (1.0 / cfg.flat_features() as f64).sqrt();
        nn::init_linear(&mut ps, "proj", cfg.flat_features(), d, proj_std, &mut rng);
        ps.insert("te", Tensor::randn(&[cfg.max_patches, d], nn::INIT_STD, &mut rng));
        ps.insert("se", Tensor::randn(&[registry::CHANNELS.len(), d], nn::INIT_STD, &mut rng));
        nn::init_stack(&mut ps, "enc", &cfg.encoder, &mut rng);
        // output head into the shared EEG/text embedding space; a linear
        // map here lets the adversarial gradient rescale the embedding
        // cloud quickly, which layer-norm gain alone cannot
        let head_std = (1.0 / d as f64).sqrt();
        nn::init_linear(&mut ps, "enc_out", d, d, head_std, &mut rng);
        if d != cfg.code_dim {
            let std = (1.0 / d as f64).sqrt();
            nn::init_linear(&mut ps, "to_code", d, cfg.code_dim, std, &mut rng);
        }
        // codebook rows start uniform on the unit sphere
        let mut codebook = Tensor::<S>::randn(&[cfg.codebook_size, cfg.code_dim], 1.0, &mut rng);
        l2_normalize_rows(&mut codebook);
        ps.insert("codebook", codebook);
        let dec_in_std = (1.0 / cfg.code_dim as f64).sqrt();
        nn::init_linear(&mut ps, "dec_in", cfg.code_dim, cfg.decoder.hidden, dec_in_std, &mut rng);
        nn::init_stack(&mut ps, "dec", &cfg.decoder, &mut rng);
        nn::init_linear(&mut ps, "head_t", cfg.decoder.hidden, cfg.patch_len, nn::INIT_STD, &mut rng);
        nn::init_linear(&mut ps, "head_f", cfg.decoder.hidden, cfg.patch_len / 2, nn::INIT_STD, &mut rng);
        // domain classifier: 2-layer MLP, hidden 2*d, one logit
        nn::init_linear(&mut ps, "adv.fc1", d, 2 * d, nn::INIT_STD, &mut rng);
        nn::init_linear(&mut ps, "adv.fc2", 2 * d, 1, nn::INIT_STD, &mut rng);
        Ok(Tokenizer { cfg, params: ps })
    }

    /// Patch rows -> conv features -> projected embeddings with temporal
    /// and spatial embeddings -> transformer. Output `[C*N, hidden]`.
    pub fn encode_on(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        sample: &PreparedSample,
    ) -> Result<Var> {
        let grid = &sample.grid;
        if grid.patch_len != self.cfg.patch_len {
            return Err(TensorError::InvalidArg {
                op: "encode_patches",
                detail: format!(
                    "patch length {} does not match configured {}",
                    grid.patch_len, self.cfg.patch_len
                ),
            });
        }
        let rows = sample.n_rows();
        if grid.n_patches > self.cfg.max_patches {
            return Err(TensorError::InvalidArg {
                op: "encode_patches",
                detail: format!("{} patches exceed max {}", grid.n_patches, self.cfg.max_patches),
            });
        }
        let data: Vec<S> = grid.patches.iter().map(|&v| lit::<S>(v as f64)).collect();
        let x = tape.constant(Tensor::new(vec![rows, 1, self.cfg.patch_len], data)?)?;

        let mut feat = x;
        for i in 0..3 {
            let w = bound.var(&format!("conv{i}.w"));
            let b = bound.var(&format!("conv{i}.b"));
            feat = tape.conv1d(feat, w, b, CONV_STRIDE[i], CONV_PADDING[i])?;
            feat = tape.gelu(feat)?;
        }
        let flat = tape.reshape(feat, &[rows, self.cfg.flat_features()])?;
        let projected = nn::linear(tape, bound, "proj", flat)?;

        // row r of the grid is (channel c = r / N, time j = r % N)
        let n = grid.n_patches;
        let time_idx: Vec<usize> = (0..rows).map(|r| r % n).collect();
        let chan_idx: Vec<usize> =
            (0..rows).map(|r| sample.channel_ids[r / n] as usize).collect();
        let te = tape.embedding(bound.var("te"), &time_idx)?;
        let se = tape.embedding(bound.var("se"), &chan_idx)?;
        let with_time = tape.add(projected, te)?;
        let embedded = tape.add(with_time, se)?;

        let mask = tape.constant(Tensor::full(&[rows, rows], S::one()))?;
        let encoded = nn::stack_forward(tape, bound, "enc", &self.cfg.encoder, embedded, mask, None)?;
        nn::linear(tape, bound, "enc_out", encoded)
    }

    /// Project encoder embeddings into codebook space. Identity when the
    /// encoder width equals the code dimension.
    pub fn to_code_on(&self, tape: &mut Tape<S>, bound: &Bound, h: Var) -> Result<Var> {
        if self.cfg.encoder.hidden == self.cfg.code_dim {
            Ok(h)
        } else {
            nn::linear(tape, bound, "to_code", h)
        }
    }

    /// Nearest code per row by Euclidean distance between unit vectors
    /// (equivalently, maximum cosine similarity). Ties break to the lowest
    /// index. Zero-norm rows are an error.
    pub fn quantize(&self, code_space: &Tensor<S>) -> Result<Vec<u32>> {
        let d = self.cfg.code_dim;
        let k = self.cfg.codebook_size;
        let codebook = self.params.get("codebook");
        let rows = code_space.numel() / d;
        let mut normed_codes = vec![S::zero(); k * d];
        for i in 0..k {
            let row = codebook.row(i);
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if norm.to_f64_exact() < 1e-30 {
                return Err(TensorError::ZeroNorm { op: "quantize" });
            }
            for j in 0..d {
                normed_codes[i * d + j] = row[j] / norm;
            }
        }
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let hrow = code_space.row(r);
            let norm = hrow.iter().map(|&v| v * v).sum::<S>().sqrt();
            if norm.to_f64_exact() < 1e-30 {
                return Err(TensorError::ZeroNorm { op: "quantize" });
            }
            let hn: Vec<S> = hrow.iter().map(|&v| v / norm).collect();
            let mut best = (0usize, S::infinity());
            for i in 0..k {
                let mut dist = S::zero();
                for j in 0..d {
                    let diff = hn[j] - normed_codes[i * d + j];
                    dist += diff * diff;
                }
                if dist < best.1 {
                    best = (i, dist);
                }
            }
            out.push(best.0 as u32);
        }
        Ok(out)
    }

    /// Decode normalized code embeddings (through the straight-through
    /// input) into temporal and frequency reconstructions.
    pub fn decode_on(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        dec_codes: Var,
        sample: &PreparedSample,
    ) -> Result<(Var, Var)> {
        let rows = sample.n_rows();
        let n = sample.grid.n_patches;
        let d_in = nn::linear(tape, bound, "dec_in", dec_codes)?;
        let time_idx: Vec<usize> = (0..rows).map(|r| r % n).collect();
        let chan_idx: Vec<usize> =
            (0..rows).map(|r| sample.channel_ids[r / n] as usize).collect();
        let te = tape.embedding(bound.var("te"), &time_idx)?;
        let se = tape.embedding(bound.var("se"), &chan_idx)?;
        let with_time = tape.add(d_in, te)?;
        let embedded = tape.add(with_time, se)?;
        let mask = tape.constant(Tensor::full(&[rows, rows], S::one()))?;
        let dec = nn::stack_forward(tape, bound, "dec", &self.cfg.decoder, embedded, mask, None)?;
        let o_t = nn::linear(tape, bound, "head_t", dec)?;
        let o_f = nn::linear(tape, bound, "head_f", dec)?;
        Ok((o_t, o_f))
    }

    /// Full per-sample loss: reconstruction (per the configured toggle),
    /// codebook, and commitment terms, with straight-through gradients into
    /// the encoder and stop-gradients exactly as the quantization objective
    /// requires.
    pub fn loss_on(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        sample: &PreparedSample,
    ) -> Result<TokenizerLoss> {
        let grid = &sample.grid;
        let rows = sample.n_rows();
        let h = self.encode_on(tape, bound, sample)?;
        let hc = self.to_code_on(tape, bound, h)?;
        let hn = tape.l2_normalize(hc)?;

        let indices = self.quantize(tape.value(hc))?;
        let idx_usize: Vec<usize> = indices.iter().map(|&i| i as usize).collect();
        let vz = tape.embedding(bound.var("codebook"), &idx_usize)?;
        let vn = tape.l2_normalize(vz)?;

        // straight-through: value of vn, gradient copied onto hn
        let sg_diff = tape.sub(vn, hn)?;
        let sg_diff = tape.detach(sg_diff)?;
        let ste = tape.add(hn, sg_diff)?;

        // codebook term moves only the codebook; commitment only the encoder
        let hn_const = tape.detach(hn)?;
        let vn_const = tape.detach(vn)?;
        let codebook_term = nn::mse(tape, hn_const, vn)?;
        let commitment_term = nn::mse(tape, hn, vn_const)?;

        let (o_t, o_f) = self.decode_on(tape, bound, ste, sample)?;

        let x_data: Vec<S> = grid.patches.iter().map(|&v| lit::<S>(v as f64)).collect();
        let x = tape.constant(Tensor::new(vec![rows, self.cfg.patch_len], x_data)?)?;
        let f_data: Vec<S> = sample.freq.values.iter().map(|&v| lit::<S>(v)).collect();
        let f = tape.constant(Tensor::new(vec![rows, self.cfg.patch_len / 2], f_data)?)?;

        let temporal = nn::mse(tape, o_t, x)?;
        let frequency = nn::mse(tape, o_f, f)?;

        let mut total = match self.cfg.reconstruct {
            Reconstruct::Temporal => temporal,
            Reconstruct::Frequency => frequency,
            Reconstruct::Both => tape.add(temporal, frequency)?,
        };
        total = tape.add(total, codebook_term)?;
        let beta_commit = tape.scale(commitment_term, self.cfg.beta)?;
        total = tape.add(total, beta_commit)?;

        Ok(TokenizerLoss {
            total,
            temporal,
            frequency,
            codebook: codebook_term,
            commitment: commitment_term,
            embeddings: h,
            normalized_codes: hn,
            tokens: TokenGrid {
                n_channels: grid.n_channels,
                n_patches: grid.n_patches,
                indices,
            },
        })
    }

    /// Inference: encode one sample and return its patch embeddings
    /// `[C*N, hidden]` plus the token grid.
    pub fn encode_sample(&self, sample: &PreparedSample) -> Result<(Tensor<S>, TokenGrid)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false)?;
        let h = self.encode_on(&mut tape, &bound, sample)?;
        let hc = self.to_code_on(&mut tape, &bound, h)?;
        let indices = self.quantize(tape.value(hc))?;
        Ok((
            tape.value(h).clone(),
            TokenGrid {
                n_channels: sample.grid.n_channels,
                n_patches: sample.grid.n_patches,
                indices,
            },
        ))
    }

    /// Normalized codebook row for a token id, as used by the decoder.
    pub fn code_embedding(&self, index: u32) -> Result<Vec<S>> {
        let codebook = self.params.get("codebook");
        if index as usize >= self.cfg.codebook_size {
            return Err(TensorError::InvalidArg {
                op: "code_embedding",
                detail: format!("code {index} out of range"),
            });
        }
        let row = codebook.row(index as usize);
        let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
        if norm.to_f64_exact() < 1e-30 {
            return Err(TensorError::ZeroNorm { op: "code_embedding" });
        }
        Ok(row.iter().map(|&v| v / norm).collect())
    }
}

fn l2_normalize_rows<S: Scalar>(t: &mut Tensor<S>) {
    let d = *t.shape().last().unwrap();
    let rows = t.numel() / d;
    let data = t.data_mut();
    for r in 0..rows {
        let row = &mut data[r * d..(r + 1) * d];
        let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
        if norm.to_f64_exact() > 0.0 {
            for v in row.iter_mut() {
                *v = *v / norm;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::EEGSample;

    fn toy_config() -> TokenizerConfig {
        TokenizerConfig {
            patch_len: 40,
            encoder: StackConfig { layers: 1, hidden: 16, heads: 2, mlp: 32 },
            decoder: StackConfig { layers: 1, hidden: 16, heads: 2, mlp: 32 },
            codebook_size: 16,
            code_dim: 8,
            max_patches: 64,
            beta: 1.0,
            reconstruct: Reconstruct::Both,
        }
    }

    fn toy_sample(cfg: &TokenizerConfig, channels: &[&str], n: usize, seed: u64) -> PreparedSample {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = channels.len();
        let l = n * cfg.patch_len;
        let window: Vec<f32> = (0..c * l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sample = EEGSample {
            channel_ids: channels.iter().map(|s| s.to_string()).collect(),
            window,
            offset: 0,
        };
        let grid = crate::signal::patchify(&sample, cfg.patch_len).unwrap();
        PreparedSample::new(grid, &sample.channel_ids).unwrap()
    }

    #[test]
    fn conv_geometry_matches_table() {
        assert_eq!(conv_feature_len(200), 25);
        let cfg = TokenizerConfig::default();
        assert_eq!(cfg.flat_features(), 400);
    }

    #[test]
    fn embedding_shape_is_rows_by_hidden() {
        let cfg = toy_config();
        let tok = Tokenizer::<f32>::init(cfg.clone(), 1).unwrap();
        let sample = toy_sample(&cfg, &["CZ", "PZ"], 3, 2);
        let (h, grid) = tok.encode_sample(&sample).unwrap();
        assert_eq!(h.shape(), &[6, 16]);
        assert_eq!(grid.indices.len(), 6);
        assert!(grid.indices.iter().all(|&i| (i as usize) < cfg.codebook_size));
    }

    #[test]
    fn channel_permutation_permutes_rows() {
        let cfg = toy_config();
        let tok = Tokenizer::<f64>::init(cfg.clone(), 3).unwrap();
        let sample = toy_sample(&cfg, &["CZ", "PZ"], 2, 5);

        // swap the two channels: rows [2,3,0,1] of the original
        let n = sample.grid.n_patches;
        let l = n * cfg.patch_len;
        let mut swapped_window = Vec::new();
        swapped_window.extend_from_slice(&sample.grid.patches[l..2 * l]);
        swapped_window.extend_from_slice(&sample.grid.patches[..l]);
        let swapped = PreparedSample::new(
            PatchGrid {
                n_channels: 2,
                n_patches: n,
                patch_len: cfg.patch_len,
                patches: swapped_window,
            },
            &["PZ".to_string(), "CZ".to_string()],
        )
        .unwrap();

        let (h0, _) = tok.encode_sample(&sample).unwrap();
        let (h1, _) = tok.encode_sample(&swapped).unwrap();
        for j in 0..n {
            for d in 0..16 {
                let a = h0.row(j)[d]; // CZ row j
                let b = h1.row(n + j)[d]; // CZ row after swap
                assert!((a - b).abs() < 1e-9, "CZ row {j} dim {d}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn all_zero_input_is_finite() {
        let cfg = toy_config();
        let tok = Tokenizer::<f32>::init(cfg.clone(), 7).unwrap();
        let grid = PatchGrid {
            n_channels: 1,
            n_patches: 2,
            patch_len: cfg.patch_len,
            patches: vec![0.0; 2 * cfg.patch_len],
        };
        let sample = PreparedSample::new(grid, &["CZ".to_string()]).unwrap();
        let (h, _) = tok.encode_sample(&sample).unwrap();
        assert!(h.is_finite());
    }

    #[test]
    fn unknown_channel_rejected() {
        let cfg = toy_config();
        let grid = PatchGrid {
            n_channels: 1,
            n_patches: 1,
            patch_len: cfg.patch_len,
            patches: vec![0.0; cfg.patch_len],
        };
        assert!(PreparedSample::new(grid, &["WAT".to_string()]).is_err());
    }

    #[test]
    fn quantize_matches_cosine_oracle() {
        use rand::Rng;
        let cfg = toy_config();
        let tok = Tokenizer::<f64>::init(cfg.clone(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = Tensor::<f64>::new(
            vec![32, cfg.code_dim],
            (0..32 * cfg.code_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let got = tok.quantize(&h).unwrap();

        // oracle: exhaustive argmax of cosine similarity
        let codebook = tok.params.get("codebook");
        for r in 0..32 {
            let hrow = h.row(r);
            let hn = norm(hrow);
            let mut best = (0usize, f64::MIN);
            for k in 0..cfg.codebook_size {
                let vrow = codebook.row(k);
                let vn = norm(vrow);
                let cos: f64 =
                    hrow.iter().zip(vrow).map(|(&a, &b)| a * b).sum::<f64>() / (hn * vn);
                if cos > best.1 {
                    best = (k, cos);
                }
            }
            assert_eq!(got[r] as usize, best.0, "row {r}");
        }
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|&x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn quantize_self_match_and_idempotence() {
        let cfg = toy_config();
        let tok = Tokenizer::<f64>::init(cfg.clone(), 21).unwrap();
        // quantizing each code's own embedding returns that code
        let codebook = tok.params.get("codebook").clone();
        let got = tok.quantize(&codebook).unwrap();
        for (j, &z) in got.iter().enumerate() {
            assert_eq!(z as usize, j);
        }
        // exact member plus a dominant direction
        let mut data = codebook.row(3).to_vec();
        for v in &mut data {
            *v = *v * 0.9;
        }
        let h = Tensor::new(vec![1, cfg.code_dim], data).unwrap();
        assert_eq!(tok.quantize(&h).unwrap()[0], 3);
    }

    #[test]
    fn quantize_zero_norm_errors() {
        let cfg = toy_config();
        let tok = Tokenizer::<f64>::init(cfg.clone(), 2).unwrap();
        let h = Tensor::zeros(&[1, cfg.code_dim]);
        assert!(matches!(tok.quantize(&h), Err(TensorError::ZeroNorm { .. })));
    }

    #[test]
    fn stop_gradient_structure() {
        // codebook term must not move the encoder; commitment must not
        // move the codebook; reconstruction reaches the codebook through
        // neither (straight-through cuts it).
        let cfg = toy_config();
        let tok = Tokenizer::<f64>::init(cfg.clone(), 31).unwrap();
        let sample = toy_sample(&cfg, &["CZ"], 2, 41);

        let grads_of = |which: &str| {
            let mut tape = Tape::new();
            let bound = tok.params.bind(&mut tape, true).unwrap();
            let loss = tok.loss_on(&mut tape, &bound, &sample).unwrap();
            let target = match which {
                "codebook" => loss.codebook,
                "commitment" => loss.commitment,
                "temporal" => loss.temporal,
                _ => unreachable!(),
            };
            tape.backward(target).unwrap();
            let cb = tape.grad(bound.var("codebook")).cloned();
            let enc = tape.grad(bound.var("proj.w")).cloned();
            (cb, enc)
        };

        let (cb, enc) = grads_of("codebook");
        assert!(cb.map_or(false, |g| g.data().iter().any(|&v| v != 0.0)),
            "codebook term must move the codebook");
        assert!(enc.map_or(true, |g| g.data().iter().all(|&v| v == 0.0)),
            "codebook term must not move the encoder");

        let (cb, enc) = grads_of("commitment");
        assert!(cb.map_or(true, |g| g.data().iter().all(|&v| v == 0.0)),
            "commitment term must not move the codebook");
        assert!(enc.map_or(false, |g| g.data().iter().any(|&v| v != 0.0)),
            "commitment term must move the encoder");

        let (cb, enc) = grads_of("temporal");
        assert!(cb.map_or(true, |g| g.data().iter().all(|&v| v == 0.0)),
            "reconstruction must not reach the codebook");
        assert!(enc.map_or(false, |g| g.data().iter().any(|&v| v != 0.0)),
            "straight-through must carry reconstruction gradient to the encoder");
    }

    #[test]
    fn decoder_outputs_and_determinism() {
        let cfg = toy_config();
        let tok = Tokenizer::<f64>::init(cfg.clone(), 51).unwrap();
        let sample = toy_sample(&cfg, &["CZ", "PZ"], 3, 52);
        let run = || {
            let mut tape = Tape::new();
            let bound = tok.params.bind(&mut tape, false).unwrap();
            let loss = tok.loss_on(&mut tape, &bound, &sample).unwrap();
            (
                tape.value(loss.total).clone(),
                tape.value(loss.temporal).clone(),
                loss.tokens.clone(),
            )
        };
        let (t1, o1, z1) = run();
        let (t2, o2, z2) = run();
        assert!(t1.bit_eq(&t2));
        assert!(o1.bit_eq(&o2));
        assert_eq!(z1, z2);
    }

    #[test]
    fn perfect_fit_loss_is_zero_for_quantization_terms() {
        // hand-sized check of the codebook/commitment terms: distance of
        // normalized vectors against themselves is zero
        let cfg = toy_config();
        let tok = Tokenizer::<f64>::init(cfg.clone(), 61).unwrap();
        let codebook = tok.params.get("codebook").clone();
        let z = tok.quantize(&codebook).unwrap();
        // row i quantizes to itself, so l2(h) == l2(v_z) and both
        // quantization terms vanish
        for (i, &zi) in z.iter().enumerate() {
            assert_eq!(zi as usize, i);
        }
    }

    #[test]
    fn toy_loss_matches_hand_computation() {
        // 1-patch sample with hand-sized vectors: check that the assembled
        // loss equals mse(o_t, x) + mse(o_f, f) + mse(l2h, l2v) terms
        let cfg = toy_config();
        let tok = Tokenizer::<f64>::init(cfg.clone(), 71).unwrap();
        let sample = toy_sample(&cfg, &["CZ"], 1, 72);
        let mut tape = Tape::new();
        let bound = tok.params.bind(&mut tape, false).unwrap();
        let loss = tok.loss_on(&mut tape, &bound, &sample).unwrap();
        let total = tape.value(loss.total).scalar_value().unwrap();
        let parts = [
            tape.value(loss.temporal).scalar_value().unwrap(),
            tape.value(loss.frequency).scalar_value().unwrap(),
            tape.value(loss.codebook).scalar_value().unwrap(),
            cfg.beta * tape.value(loss.commitment).scalar_value().unwrap(),
        ];
        let sum: f64 = parts.iter().sum();
        assert!((total - sum).abs() < 1e-12, "{total} vs {sum}");
        // codebook and commitment terms are equal in value (they differ
        // only in gradient routing)
        assert!(
            (tape.value(loss.codebook).scalar_value().unwrap()
                - tape.value(loss.commitment).scalar_value().unwrap())
            .abs()
                < 1e-12
        );
    }
}
