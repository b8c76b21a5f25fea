//! Deterministic EEG preprocessing: zero-phase band-pass and notch
//! filtering, rational resampling to 200 Hz, amplitude scaling,
//! segmentation into fixed windows, and patchification.

use thiserror::Error;

use crate::dataio::registry;

/// Output rate of the preprocessing chain.
pub const TARGET_FS: f64 = 200.0;
/// Patch length in samples (1 second at 200 Hz).
pub const PATCH_LEN: usize = 200;
/// Band-pass corner frequencies in Hz.
pub const HIGHPASS_HZ: f64 = 0.1;
pub const LOWPASS_HZ: f64 = 75.0;
/// Amplitude scaling divisor (µV to dimensionless).
pub const SCALE_DIV: f64 = 100.0;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("sampling rate {0} Hz too low; need >= 150 Hz")]
    RateTooLow(f64),
    #[error("sampling rate {0} Hz is not integral")]
    RateNotIntegral(f64),
    #[error("recording shorter than 1 second")]
    TooShort,
    #[error("unknown channel id {0:?}")]
    UnknownChannel(String),
    #[error("duplicate channel id {0:?}")]
    DuplicateChannel(String),
    #[error("non-finite sample value")]
    NonFinite,
    #[error("window of {0} samples longer than recording of {1}")]
    WindowTooLong(usize, usize),
    #[error("window length {0} is not a positive multiple of the patch size {1}")]
    BadWindow(usize, usize),
    #[error("sample length {0} not divisible by patch size {1}")]
    NotDivisible(usize, usize),
}

pub type Result<T> = std::result::Result<T, SignalError>;

/// Power-line frequency for the notch filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineFreq {
    Hz50,
    Hz60,
}

impl LineFreq {
    pub fn hz(self) -> f64 {
        match self {
            LineFreq::Hz50 => 50.0,
            LineFreq::Hz60 => 60.0,
        }
    }
}

/// Multi-channel EEG time series, row-major `[C, T]`, in µV before
/// preprocessing and dimensionless (divided by 100) after.
#[derive(Debug, Clone)]
pub struct RawRecording {
    pub channel_ids: Vec<String>,
    pub sampling_rate: f64,
    pub samples: Vec<f32>,
    pub line_freq: LineFreq,
}

impl RawRecording {
    pub fn new(
        channel_ids: Vec<String>,
        sampling_rate: f64,
        samples: Vec<f32>,
        line_freq: LineFreq,
    ) -> Result<Self> {
        let rec = RawRecording { channel_ids, sampling_rate, samples, line_freq };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for id in &self.channel_ids {
            if !registry::is_known(id) {
                return Err(SignalError::UnknownChannel(id.clone()));
            }
            if !seen.insert(id.to_ascii_uppercase()) {
                return Err(SignalError::DuplicateChannel(id.clone()));
            }
        }
        if self.sampling_rate <= 0.0 {
            return Err(SignalError::RateTooLow(self.sampling_rate));
        }
        if !self.channel_ids.is_empty() && self.samples.len() % self.channel_ids.len() != 0 {
            return Err(SignalError::NonFinite);
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            return Err(SignalError::NonFinite);
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.channel_ids.len()
    }

    pub fn n_samples(&self) -> usize {
        if self.channel_ids.is_empty() {
            0
        } else {
            self.samples.len() / self.channel_ids.len()
        }
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let t = self.n_samples();
        &self.samples[c * t..(c + 1) * t]
    }
}

/// One fixed-length window cut from a preprocessed recording.
#[derive(Debug, Clone)]
pub struct EEGSample {
    pub channel_ids: Vec<String>,
    /// Row-major `[C, L]`, dimensionless after scaling.
    pub window: Vec<f32>,
    /// Sample offset of this window in its parent recording.
    pub offset: usize,
}

impl EEGSample {
    pub fn len(&self) -> usize {
        self.window.len() / self.channel_ids.len().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let l = self.len();
        &self.window[c * l..(c + 1) * l]
    }

    /// Fraction of samples outside the typical post-scaling range [-2, 2].
    /// Informational only.
    pub fn out_of_range_fraction(&self) -> f64 {
        if self.window.is_empty() {
            return 0.0;
        }
        let n = self.window.iter().filter(|v| v.abs() > 2.0).count();
        n as f64 / self.window.len() as f64
    }
}

/// Non-overlapping patches of one sample: `[C, N, P]` row-major.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub n_channels: usize,
    pub n_patches: usize,
    pub patch_len: usize,
    pub patches: Vec<f32>,
}

impl PatchGrid {
    pub fn patch(&self, c: usize, j: usize) -> &[f32] {
        let p = self.patch_len;
        let start = (c * self.n_patches + j) * p;
        &self.patches[start..start + p]
    }

    /// Undo patchification: concatenate patches back into a `[C, L]` window.
    pub fn flatten(&self) -> Vec<f32> {
        self.patches.clone()
    }
}

// ── biquad filters ────────────────────────────────────────────────────────

/// Second-order IIR section, normalized so a0 = 1. Direct form II
/// transposed.
#[derive(Debug, Clone, Copy)]
pub struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    pub fn lowpass(fs: f64, fc: f64, q: f64) -> Biquad {
        let w = 2.0 * std::f64::consts::PI * fc / fs;
        let alpha = w.sin() / (2.0 * q);
        let cw = w.cos();
        let a0 = 1.0 + alpha;
        Biquad {
            b0: (1.0 - cw) / 2.0 / a0,
            b1: (1.0 - cw) / a0,
            b2: (1.0 - cw) / 2.0 / a0,
            a1: -2.0 * cw / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    pub fn highpass(fs: f64, fc: f64, q: f64) -> Biquad {
        let w = 2.0 * std::f64::consts::PI * fc / fs;
        let alpha = w.sin() / (2.0 * q);
        let cw = w.cos();
        let a0 = 1.0 + alpha;
        Biquad {
            b0: (1.0 + cw) / 2.0 / a0,
            b1: -(1.0 + cw) / a0,
            b2: (1.0 + cw) / 2.0 / a0,
            a1: -2.0 * cw / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    pub fn notch(fs: f64, f0: f64, q: f64) -> Biquad {
        let w = 2.0 * std::f64::consts::PI * f0 / fs;
        let alpha = w.sin() / (2.0 * q);
        let cw = w.cos();
        let a0 = 1.0 + alpha;
        Biquad {
            b0: 1.0 / a0,
            b1: -2.0 * cw / a0,
            b2: 1.0 / a0,
            a1: -2.0 * cw / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    /// Steady-state filter state for a unit step input: starting from this
    /// state, a constant input produces the DC-gain-scaled constant output
    /// with no transient.
    fn step_state(&self) -> (f64, f64) {
        let dc = (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2);
        (dc - self.b0, self.b2 - self.a2 * dc)
    }

    fn run(&self, x: &[f64], scale_state: f64) -> Vec<f64> {
        let (z1i, z2i) = self.step_state();
        let mut z1 = z1i * scale_state;
        let mut z2 = z2i * scale_state;
        let mut y = Vec::with_capacity(x.len());
        for &v in x {
            let out = self.b0 * v + z1;
            z1 = self.b1 * v - self.a1 * out + z2;
            z2 = self.b2 * v - self.a2 * out;
            y.push(out);
        }
        y
    }
}

/// 4th-order Butterworth as two cascaded biquads (pole-pair Q values).
pub fn butterworth4_lowpass(fs: f64, fc: f64) -> [Biquad; 2] {
    let q1 = 1.0 / (2.0 * (std::f64::consts::PI / 8.0).cos());
    let q2 = 1.0 / (2.0 * (3.0 * std::f64::consts::PI / 8.0).cos());
    [Biquad::lowpass(fs, fc, q1), Biquad::lowpass(fs, fc, q2)]
}

pub fn butterworth4_highpass(fs: f64, fc: f64) -> [Biquad; 2] {
    let q1 = 1.0 / (2.0 * (std::f64::consts::PI / 8.0).cos());
    let q2 = 1.0 / (2.0 * (3.0 * std::f64::consts::PI / 8.0).cos());
    [Biquad::highpass(fs, fc, q1), Biquad::highpass(fs, fc, q2)]
}

/// Forward-backward (zero-phase) application of one biquad with
/// odd-reflection edge padding and steady-state initial conditions.
/// `pad` should exceed the section's settling time so the startup
/// transient decays inside the padding; it is capped at the signal
/// length.
pub fn filtfilt(section: &Biquad, x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return x.to_vec();
    }
    let pad = pad.clamp(1, n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }

    let fwd = section.run(&ext, ext[0]);
    let mut rev: Vec<f64> = fwd.into_iter().rev().collect();
    rev = section.run(&rev, rev[0]);
    rev.reverse();
    rev[pad..pad + n].to_vec()
}

/// Apply a cascade of sections with filtfilt, one at a time.
pub fn filtfilt_cascade(sections: &[Biquad], x: &[f64], pad: usize) -> Vec<f64> {
    let mut y = x.to_vec();
    for s in sections {
        y = filtfilt(s, &y, pad);
    }
    y
}

/// Padding long enough for the slow 0.1 Hz high-pass poles to settle.
pub fn settle_pad(fs: f64) -> usize {
    (fs * 20.0).ceil() as usize
}

// ── rational resampler ────────────────────────────────────────────────────

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_sq = (x / 2.0) * (x / 2.0);
    for k in 1..64 {
        term *= half_sq / ((k * k) as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

const KAISER_BETA: f64 = 8.0;
const SINC_CROSSINGS: f64 = 16.0;

/// Windowed-sinc rational resampler (Kaiser window). Sampling rates must be
/// integral so the ratio is exact.
pub fn resample(x: &[f64], fs_in: f64, fs_out: f64) -> Result<Vec<f64>> {
    for fs in [fs_in, fs_out] {
        if (fs - fs.round()).abs() > 1e-9 || fs <= 0.0 {
            return Err(SignalError::RateNotIntegral(fs));
        }
    }
    let a = fs_in.round() as u64;
    let b = fs_out.round() as u64;
    if a == b {
        return Ok(x.to_vec());
    }
    let g = gcd(a, b);
    let up = (b / g) as f64; // L
    let down = (a / g) as f64; // M

    // Cutoff relative to the input Nyquist; < 1 only when decimating.
    let fc = (up / down).min(1.0);
    let half_width = (SINC_CROSSINGS / fc).ceil() as i64;
    let i0_beta = bessel_i0(KAISER_BETA);

    let n_in = x.len() as i64;
    let n_out = (x.len() as u64 * (b / g)) / (a / g);
    let mut y = Vec::with_capacity(n_out as usize);
    for n in 0..n_out {
        // center of the kernel in input-sample units: n * M / L
        let num = n * (a / g);
        let center_int = (num / (b / g)) as i64;
        let frac = (num % (b / g)) as f64 / up;
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for k in center_int - half_width..=center_int + half_width + 1 {
            let u = k as f64 - (center_int as f64 + frac);
            if u.abs() > half_width as f64 {
                continue;
            }
            let sinc = if u.abs() < 1e-12 {
                1.0
            } else {
                let pu = std::f64::consts::PI * fc * u;
                pu.sin() / pu
            };
            let wk = bessel_i0(KAISER_BETA * (1.0 - (u / half_width as f64).powi(2)).max(0.0).sqrt())
                / i0_beta;
            let w = sinc * wk * fc;
            wsum += w;
            if k >= 0 && k < n_in {
                acc += x[k as usize] * w;
            }
        }
        y.push(if wsum.abs() > 1e-12 { acc / wsum } else { 0.0 });
    }
    Ok(y)
}

// ── pipeline operations ───────────────────────────────────────────────────

/// Full preprocessing chain: band-pass 0.1-75 Hz, notch at the line
/// frequency, resample to 200 Hz, divide amplitudes by 100.
pub fn preprocess_recording(raw: &RawRecording) -> Result<RawRecording> {
    raw.validate()?;
    if raw.sampling_rate < 150.0 {
        return Err(SignalError::RateTooLow(raw.sampling_rate));
    }
    if (raw.n_samples() as f64) < raw.sampling_rate {
        return Err(SignalError::TooShort);
    }
    let conditioned = condition_channels(raw)?;
    let t_out = conditioned.first().map_or(0, Vec::len);
    let mut samples = Vec::with_capacity(raw.n_channels() * t_out);
    for ch in conditioned {
        samples.extend(ch.iter().map(|&v| (v / SCALE_DIV) as f32));
    }
    Ok(RawRecording {
        channel_ids: raw.channel_ids.clone(),
        sampling_rate: TARGET_FS,
        samples,
        line_freq: raw.line_freq,
    })
}

/// Filtering and resampling without the amplitude scaling, in f64.
/// Exposed separately so the idempotence of the filter chain can be
/// checked independently of the one-time ÷100 scaling.
pub fn condition_channels(raw: &RawRecording) -> Result<Vec<Vec<f64>>> {
    let fs = raw.sampling_rate;
    let hp = butterworth4_highpass(fs, HIGHPASS_HZ);
    let lp = butterworth4_lowpass(fs, LOWPASS_HZ);
    let notch = Biquad::notch(fs, raw.line_freq.hz(), 30.0);
    let pad = settle_pad(fs);
    let mut out = Vec::with_capacity(raw.n_channels());
    for c in 0..raw.n_channels() {
        let x: Vec<f64> = raw.channel(c).iter().map(|&v| v as f64).collect();
        let mut y = filtfilt_cascade(&hp, &x, pad);
        y = filtfilt_cascade(&lp, &y, pad);
        y = filtfilt(&notch, &y, pad);
        y = resample(&y, fs, TARGET_FS)?;
        out.push(y);
    }
    Ok(out)
}

/// Cut a 200 Hz recording into non-overlapping windows of
/// `window_seconds`, dropping the trailing remainder.
pub fn segment(rec: &RawRecording, window_seconds: f64) -> Result<Vec<EEGSample>> {
    let l = (window_seconds * TARGET_FS).round() as usize;
    if l == 0 || (window_seconds * TARGET_FS - l as f64).abs() > 1e-9 || l % PATCH_LEN != 0 {
        return Err(SignalError::BadWindow(l, PATCH_LEN));
    }
    let t = rec.n_samples();
    if t < l {
        return Err(SignalError::WindowTooLong(l, t));
    }
    let count = t / l;
    let c = rec.n_channels();
    let mut samples = Vec::with_capacity(count);
    for w in 0..count {
        let offset = w * l;
        let mut window = Vec::with_capacity(c * l);
        for ch in 0..c {
            window.extend_from_slice(&rec.channel(ch)[offset..offset + l]);
        }
        samples.push(EEGSample { channel_ids: rec.channel_ids.clone(), window, offset });
    }
    Ok(samples)
}

/// Rearrange a window into non-overlapping patches of `patch_len`.
pub fn patchify(sample: &EEGSample, patch_len: usize) -> Result<PatchGrid> {
    let l = sample.len();
    if patch_len == 0 || l % patch_len != 0 {
        return Err(SignalError::NotDivisible(l, patch_len));
    }
    Ok(PatchGrid {
        n_channels: sample.channel_ids.len(),
        n_patches: l / patch_len,
        patch_len,
        patches: sample.window.clone(),
    })
}
