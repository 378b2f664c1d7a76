//! Attention-column features: Hann-window STFT magnitudes, an exponentially
//! discounted reduction over frames that carries across chunks, per-bin
//! scaling, and a sinusoidal embedding of token oldness.
//!
//! A chunk of `n_up` queries gives each cached token a length-`n_up` column
//! of attention values. The column is left-padded with `n_w - s_w` zeros so
//! that exactly `n_up / s_w` frames come out, each ending on a hop boundary.

use serde::{Deserialize, Serialize};

use crate::error::{NammError, Result};
use crate::numerics::sinusoidal_embedding;

/// Window length used by the scorer's feature layout.
pub const WINDOW: usize = 32;
/// Hop between successive frames.
pub const STRIDE: usize = 16;
/// Frequency bins from DC to Nyquist for [`WINDOW`].
pub const N_BINS: usize = WINDOW / 2 + 1;
/// Width of the oldness embedding.
pub const POS_DIM: usize = 8;
/// Base of the oldness embedding's geometric frequency ladder.
pub const POS_BASE: f64 = 1e4;
/// Scorer input width: spectral bins followed by the oldness embedding.
pub const FEATURE_DIM: usize = N_BINS + POS_DIM;

/// Default discount, `0.99^16`.
pub fn default_gamma() -> f64 {
    0.99f64.powi(16)
}

const SCALE_STD_MIN: f64 = 1e-6;
const SCALE_STD_MAX: f64 = 1e6;

/// Magnitudes of one STFT frame, bins `0..=n_w/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectroFrame(pub Vec<f64>);

/// Discounted per-bin reduction carried by each cached token.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub reduced: [f64; N_BINS],
    pub chunk_count: u32,
}

impl Default for EmaState {
    fn default() -> Self {
        Self {
            reduced: [0.0; N_BINS],
            chunk_count: 0,
        }
    }
}

/// Scaled spectral bins followed by the oldness embedding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl FeatureVector {
    pub fn spectral(&self) -> &[f64] {
        &self.0[..N_BINS]
    }

    pub fn positional(&self) -> &[f64] {
        &self.0[N_BINS..]
    }
}

/// Per-bin multipliers that bring raw reductions to unit variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormScales(pub [f64; N_BINS]);

impl Default for NormScales {
    fn default() -> Self {
        Self([1.0; N_BINS])
    }
}

/// Symmetric Hann window, `w[k] = 0.5 (1 - cos(2πk / (n_w - 1)))`.
pub fn hann_window(n_w: usize) -> Result<Vec<f64>> {
    if n_w < 2 {
        return Err(NammError::invalid(format!("hann window needs n_w >= 2, got {n_w}")));
    }
    let denom = (n_w - 1) as f64;
    Ok((0..n_w)
        .map(|k| 0.5 * (1.0 - (std::f64::consts::TAU * k as f64 / denom).cos()))
        .collect())
}

/// Precomputed windowed DFT tables for a fixed `(n_w, s_w)`.
#[derive(Clone, Debug)]
pub struct StftPlan {
    n_w: usize,
    s_w: usize,
    n_bins: usize,
    // [bin][tap] = w[tap]·cos(2π·bin·tap/n_w), likewise for sin.
    cos_table: Vec<f64>,
    sin_table: Vec<f64>,
}

impl StftPlan {
    pub fn new(n_w: usize, s_w: usize) -> Result<Self> {
        if s_w == 0 || n_w != 2 * s_w {
            return Err(NammError::invalid(format!(
                "stft needs n_w = 2·s_w, got n_w={n_w} s_w={s_w}"
            )));
        }
        let window = hann_window(n_w)?;
        let n_bins = n_w / 2 + 1;
        let mut cos_table = Vec::with_capacity(n_bins * n_w);
        let mut sin_table = Vec::with_capacity(n_bins * n_w);
        for bin in 0..n_bins {
            for (tap, w) in window.iter().enumerate() {
                // Reduce the phase index mod n_w before converting to keep
                // the angle small and the table exact-ish.
                let phase = (bin * tap) % n_w;
                let angle = std::f64::consts::TAU * phase as f64 / n_w as f64;
                cos_table.push(w * angle.cos());
                sin_table.push(w * angle.sin());
            }
        }
        Ok(Self {
            n_w,
            s_w,
            n_bins,
            cos_table,
            sin_table,
        })
    }

    pub fn stride(&self) -> usize {
        self.s_w
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn frame_count(&self, signal_len: usize) -> usize {
        signal_len / self.s_w
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len == 0 || len % self.s_w != 0 {
            return Err(NammError::invalid(format!(
                "signal length {len} is not a positive multiple of the stride {}",
                self.s_w
            )));
        }
        Ok(())
    }

    /// Visits each frame's (re, im) bins in time order.
    fn for_each_frame(&self, signal: &[f64], mut visit: impl FnMut(usize, &[f64], &[f64])) {
        let pad = self.n_w - self.s_w;
        let mut re = vec![0.0; self.n_bins];
        let mut im = vec![0.0; self.n_bins];
        let mut frame = vec![0.0; self.n_w];
        for t in 0..self.frame_count(signal.len()) {
            // Padded index p maps to signal index p - pad.
            let start = t * self.s_w;
            for (tap, slot) in frame.iter_mut().enumerate() {
                let p = start + tap;
                *slot = if p < pad { 0.0 } else { signal[p - pad] };
            }
            let all_zero = frame.iter().all(|&v| v == 0.0);
            for bin in 0..self.n_bins {
                if all_zero {
                    re[bin] = 0.0;
                    im[bin] = 0.0;
                    continue;
                }
                let c = &self.cos_table[bin * self.n_w..(bin + 1) * self.n_w];
                let s = &self.sin_table[bin * self.n_w..(bin + 1) * self.n_w];
                let mut acc_re = 0.0;
                let mut acc_im = 0.0;
                for tap in 0..self.n_w {
                    acc_re += frame[tap] * c[tap];
                    acc_im -= frame[tap] * s[tap];
                }
                re[bin] = acc_re;
                im[bin] = acc_im;
            }
            visit(t, &re, &im);
        }
    }

    /// Complex bins per frame, for callers that need phase.
    pub fn complex_frames(&self, signal: &[f64]) -> Result<Vec<Vec<(f64, f64)>>> {
        self.check_len(signal.len())?;
        let mut out = Vec::with_capacity(self.frame_count(signal.len()));
        self.for_each_frame(signal, |_, re, im| {
            out.push(re.iter().zip(im).map(|(&r, &i)| (r, i)).collect());
        });
        Ok(out)
    }

    pub fn magnitudes(&self, signal: &[f64]) -> Result<Vec<SpectroFrame>> {
        self.check_len(signal.len())?;
        let mut out = Vec::with_capacity(self.frame_count(signal.len()));
        self.for_each_frame(signal, |_, re, im| {
            out.push(SpectroFrame(
                re.iter().zip(im).map(|(r, i)| r.hypot(*i)).collect(),
            ));
        });
        Ok(out)
    }

    /// STFT followed by the discounted reduction, without materializing frames.
    pub fn reduce(&self, signal: &[f64], gamma: f64, prev: &EmaState) -> Result<EmaState> {
        self.check_len(signal.len())?;
        if self.n_bins != N_BINS {
            return Err(NammError::invalid(format!(
                "reduction expects {N_BINS} bins, plan has {}",
                self.n_bins
            )));
        }
        let n_t = self.frame_count(signal.len());
        let mut reduced = [0.0; N_BINS];
        // Newest frame weighs 1, the frame before it γ, and so on.
        self.for_each_frame(signal, |t, re, im| {
            let w = gamma.powi((n_t - 1 - t) as i32);
            for bin in 0..N_BINS {
                reduced[bin] += w * re[bin].hypot(im[bin]);
            }
        });
        let carry = gamma.powi(n_t as i32);
        for (r, p) in reduced.iter_mut().zip(&prev.reduced) {
            *r += carry * p;
        }
        Ok(EmaState {
            reduced,
            chunk_count: prev.chunk_count + 1,
        })
    }
}

/// Hann-window STFT magnitudes of `signal`, one frame per hop.
pub fn stft_magnitudes(signal: &[f64], n_w: usize, s_w: usize) -> Result<Vec<SpectroFrame>> {
    StftPlan::new(n_w, s_w)?.magnitudes(signal)
}

/// Discounted reduction of chronologically ordered `frames` on top of `prev`:
/// the newest frame has weight 1, older frames `γ^k`, and `prev` `γ^n_T`.
/// Reducing a sequence in pieces therefore equals reducing it in one pass.
pub fn ema_reduce(frames: &[SpectroFrame], gamma: f64, prev: &EmaState) -> Result<EmaState> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(NammError::invalid(format!("gamma must be in (0, 1], got {gamma}")));
    }
    if frames.is_empty() {
        return Ok(*prev);
    }
    let n_t = frames.len();
    let mut reduced = [0.0; N_BINS];
    for (t, frame) in frames.iter().enumerate() {
        if frame.0.len() != N_BINS {
            return Err(NammError::shape(format!(
                "frame has {} bins, expected {N_BINS}",
                frame.0.len()
            )));
        }
        let w = gamma.powi((n_t - 1 - t) as i32);
        for (r, v) in reduced.iter_mut().zip(&frame.0) {
            *r += w * v;
        }
    }
    let carry = gamma.powi(n_t as i32);
    for (r, p) in reduced.iter_mut().zip(&prev.reduced) {
        *r += carry * p;
    }
    Ok(EmaState {
        reduced,
        chunk_count: prev.chunk_count + 1,
    })
}

/// Scales that give each reduced bin unit population variance over
/// `samples`. Standard deviations are clamped to `[1e-6, 1e6]`, so a
/// constant bin gets the ceiling scale `1e6`.
pub fn calibrate_normalization(samples: &[[f64; N_BINS]]) -> Result<NormScales> {
    if samples.len() < 2 {
        return Err(NammError::invalid(format!(
            "calibration needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mut scales = [0.0; N_BINS];
    for (k, scale) in scales.iter_mut().enumerate() {
        let mean = samples.iter().map(|s| s[k]).sum::<f64>() / n;
        let var = samples.iter().map(|s| (s[k] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().clamp(SCALE_STD_MIN, SCALE_STD_MAX);
        *scale = 1.0 / std;
    }
    Ok(NormScales(scales))
}

/// Everything needed to turn attention columns into scorer inputs.
#[derive(Clone, Debug)]
pub struct FeaturePipeline {
    plan: StftPlan,
    pub gamma: f64,
    pub scales: NormScales,
}

impl FeaturePipeline {
    pub fn new(n_w: usize, s_w: usize, gamma: f64, scales: NormScales) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(NammError::invalid(format!("gamma must be in (0, 1], got {gamma}")));
        }
        let plan = StftPlan::new(n_w, s_w)?;
        if plan.n_bins() != N_BINS {
            return Err(NammError::invalid(format!(
                "window {n_w} gives {} bins; the feature layout needs {N_BINS}",
                plan.n_bins()
            )));
        }
        Ok(Self { plan, gamma, scales })
    }

    pub fn with_defaults(scales: NormScales) -> Self {
        Self::new(WINDOW, STRIDE, default_gamma(), scales).expect("default layout is valid")
    }

    pub fn plan(&self) -> &StftPlan {
        &self.plan
    }

    /// Raw (unscaled) reduction for one column on top of `prev`.
    pub fn reduce(&self, column: &[f64], prev: &EmaState) -> Result<EmaState> {
        self.plan.reduce(column, self.gamma, prev)
    }

    /// Scales an already reduced state and appends the oldness embedding.
    pub fn features_from_state(&self, state: &EmaState, oldness: u64) -> FeatureVector {
        let mut out = [0.0; FEATURE_DIM];
        for k in 0..N_BINS {
            out[k] = state.reduced[k] * self.scales.0[k];
        }
        let pos = sinusoidal_embedding(oldness as f64, POS_DIM, POS_BASE)
            .expect("POS_DIM is even");
        out[N_BINS..].copy_from_slice(&pos);
        FeatureVector(out)
    }

    pub fn build(&self, column: &[f64], prev: &EmaState, oldness: u64) -> Result<(FeatureVector, EmaState)> {
        let state = self.reduce(column, prev)?;
        Ok((self.features_from_state(&state, oldness), state))
    }
}

/// One token's features from its latest attention column chunk; returns the
/// updated reduction state to carry into the next chunk.
pub fn build_features(
    column: &[f64],
    prev: &EmaState,
    oldness: u64,
    scales: &NormScales,
    gamma: f64,
) -> Result<(FeatureVector, EmaState)> {
    FeaturePipeline::new(WINDOW, STRIDE, gamma, *scales)?.build(column, prev, oldness)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    /// Direct O(n²) DFT of one padded frame; independent of the plan tables.
    fn naive_frames(signal: &[f64], n_w: usize, s_w: usize) -> Vec<Vec<(f64, f64)>> {
        let pad = n_w - s_w;
        let mut padded = vec![0.0; pad];
        padded.extend_from_slice(signal);
        let w: Vec<f64> = (0..n_w)
            .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / (n_w as f64 - 1.0)).cos())
            .collect();
        (0..signal.len() / s_w)
            .map(|t| {
                (0..=n_w / 2)
                    .map(|bin| {
                        let mut re = 0.0;
                        let mut im = 0.0;
                        for n in 0..n_w {
                            let x = padded[t * s_w + n] * w[n];
                            let a = -2.0 * std::f64::consts::PI * (bin * n) as f64 / n_w as f64;
                            re += x * a.cos();
                            im += x * a.sin();
                        }
                        (re, im)
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn hann_examples() {
        let w = hann_window(32).unwrap();
        assert_eq!(w[0], 0.0);
        let sum: f64 = w.iter().sum();
        assert!((sum - 15.5).abs() < 1e-12, "{sum}");
        let w = hann_window(33).unwrap();
        assert!((w[16] - 1.0).abs() < 1e-15);
        assert!(hann_window(1).is_err());
    }

    #[test]
    fn constant_signal_gives_window_spectrum() {
        // A windowed constant is the window itself, so interior frames carry
        // the window's own spectrum: DC is its sum, and the main lobe leaks
        // into bin 1.
        let w = hann_window(32).unwrap();
        let spectrum = window_spectrum(&w);
        let frames = stft_magnitudes(&vec![1.0; 512], 32, 16).unwrap();
        assert_eq!(frames.len(), 32);
        for frame in &frames[1..] {
            assert!((frame.0[0] - 15.5).abs() < 1e-9);
            for k in 0..N_BINS {
                assert!((frame.0[k] - spectrum[k]).abs() < 1e-9);
            }
        }
        assert!(spectrum[1] > 8.0);
    }

    fn window_spectrum(w: &[f64]) -> Vec<f64> {
        let n = w.len() as f64;
        (0..N_BINS)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &v) in w.iter().enumerate() {
                    let a = std::f64::consts::TAU * (k * t) as f64 / n;
                    re += v * a.cos();
                    im -= v * a.sin();
                }
                re.hypot(im)
            })
            .collect()
    }

    #[test]
    fn zero_signal_gives_zero_frames() {
        let frames = stft_magnitudes(&[0.0; 64], 32, 16).unwrap();
        assert!(frames.iter().all(|f| f.0.iter().all(|&m| m == 0.0)));
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(stft_magnitudes(&[0.0; 50], 32, 16).is_err());
        assert!(stft_magnitudes(&[], 32, 16).is_err());
        assert!(StftPlan::new(32, 8).is_err());
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = Rng::new(3);
        let signal: Vec<f64> = (0..512).map(|_| rng.next_f64()).collect();
        let plan = StftPlan::new(32, 16).unwrap();
        let ours = plan.complex_frames(&signal).unwrap();
        let oracle = naive_frames(&signal, 32, 16);
        for (a, b) in ours.iter().zip(&oracle) {
            for ((ar, ai), (br, bi)) in a.iter().zip(b) {
                assert!((ar - br).abs() < 1e-9 && (ai - bi).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn stft_is_linear() {
        let mut rng = Rng::new(11);
        let x: Vec<f64> = (0..128).map(|_| rng.next_normal()).collect();
        let y: Vec<f64> = (0..128).map(|_| rng.next_normal()).collect();
        let (a, b) = (0.7, -1.3);
        let z: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let plan = StftPlan::new(32, 16).unwrap();
        let (fx, fy, fz) = (
            plan.complex_frames(&x).unwrap(),
            plan.complex_frames(&y).unwrap(),
            plan.complex_frames(&z).unwrap(),
        );
        for t in 0..fx.len() {
            for k in 0..N_BINS {
                let re = a * fx[t][k].0 + b * fy[t][k].0;
                let im = a * fx[t][k].1 + b * fy[t][k].1;
                assert!((fz[t][k].0 - re).abs() < 1e-10);
                assert!((fz[t][k].1 - im).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn magnitudes_invariant_to_phase_shift_of_aligned_sinusoid() {
        // Bin-4 sinusoid: period 8 divides the 16-sample hop.
        let f = |shift: usize| -> Vec<f64> {
            (0..256)
                .map(|n| (std::f64::consts::TAU * 4.0 * (n + shift) as f64 / 32.0).sin())
                .collect()
        };
        let spectrum = window_spectrum(&hann_window(32).unwrap());
        let base = stft_magnitudes(&f(0), 32, 16).unwrap();
        for shift in [1, 3, 5] {
            let shifted = stft_magnitudes(&f(shift), 32, 16).unwrap();
            // Interior frames only; the first frame straddles the zero pad.
            // Bin k sees the two spectral lines at ±4 through W(k-4) and
            // W(k+4); only their interference depends on phase, so the
            // change is bounded by the smaller leakage term. A periodic
            // window would make this exact.
            for t in 1..base.len() {
                for k in 0..N_BINS {
                    let bound = spectrum[(k + 4).min(32 - k - 4)].min(spectrum[k.abs_diff(4)]) + 1e-9;
                    assert!((base[t].0[k] - shifted[t].0[k]).abs() <= bound);
                }
                // The peak sits at half the window sum.
                assert!((base[t].0[4] - 7.75).abs() < 0.1);
            }
        }
    }

    fn scalar_frames(values: &[f64]) -> Vec<SpectroFrame> {
        values.iter().map(|&v| SpectroFrame(vec![v; N_BINS])).collect()
    }

    #[test]
    fn ema_examples() {
        let s = ema_reduce(&scalar_frames(&[1.0, 1.0]), 0.5, &EmaState::default()).unwrap();
        assert_eq!(s.reduced[0], 1.5);
        assert_eq!(s.chunk_count, 1);
        let s = ema_reduce(&scalar_frames(&[1.0; 4]), 1.0, &EmaState::default()).unwrap();
        assert_eq!(s.reduced[0], 4.0);
        let prev = EmaState {
            reduced: [2.0; N_BINS],
            chunk_count: 3,
        };
        assert_eq!(ema_reduce(&[], 0.5, &prev).unwrap(), prev);
        assert!(ema_reduce(&[], 0.0, &prev).is_err());
    }

    #[test]
    fn chunked_ema_equals_single_pass() {
        let mut rng = Rng::new(5);
        let gamma = default_gamma();
        let frames: Vec<SpectroFrame> = (0..32)
            .map(|_| SpectroFrame((0..N_BINS).map(|_| rng.next_f64()).collect()))
            .collect();
        let whole = ema_reduce(&frames, gamma, &EmaState::default()).unwrap();
        let first = ema_reduce(&frames[..16], gamma, &EmaState::default()).unwrap();
        let both = ema_reduce(&frames[16..], gamma, &first).unwrap();
        for k in 0..N_BINS {
            assert!((whole.reduced[k] - both.reduced[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_reduce_matches_frames_then_reduce() {
        let mut rng = Rng::new(8);
        let signal: Vec<f64> = (0..64).map(|_| rng.next_f64()).collect();
        let plan = StftPlan::new(32, 16).unwrap();
        let prev = EmaState {
            reduced: [0.3; N_BINS],
            chunk_count: 2,
        };
        let fused = plan.reduce(&signal, 0.9, &prev).unwrap();
        let frames = plan.magnitudes(&signal).unwrap();
        let split = ema_reduce(&frames, 0.9, &prev).unwrap();
        for k in 0..N_BINS {
            assert!((fused.reduced[k] - split.reduced[k]).abs() < 1e-12);
        }
        assert_eq!(fused.chunk_count, 3);
    }

    #[test]
    fn calibration_examples() {
        let mut samples = vec![[1.0; N_BINS]; 4];
        samples[0][0] = -1.0;
        samples[1][0] = 3.0;
        samples[2][0] = -1.0;
        samples[3][0] = 3.0;
        let s = calibrate_normalization(&samples).unwrap();
        assert!((s.0[0] - 0.5).abs() < 1e-15);
        assert_eq!(s.0[1], 1e6);
        assert!(calibrate_normalization(&samples[..1]).is_err());
    }

    #[test]
    fn calibrated_features_have_unit_variance() {
        let mut rng = Rng::new(13);
        let samples: Vec<[f64; N_BINS]> = (0..200)
            .map(|_| {
                let mut s = [0.0; N_BINS];
                for (k, v) in s.iter_mut().enumerate() {
                    *v = rng.next_normal() * (k as f64 + 0.5) + 3.0;
                }
                s
            })
            .collect();
        let scales = calibrate_normalization(&samples).unwrap();
        for k in 0..N_BINS {
            let xs: Vec<f64> = samples.iter().map(|s| s[k] * scales.0[k]).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_column_fresh_token() {
        let (fv, state) =
            build_features(&[0.0; 512], &EmaState::default(), 0, &NormScales::default(), default_gamma())
                .unwrap();
        assert!(fv.spectral().iter().all(|&v| v == 0.0));
        assert_eq!(fv.positional(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(state.chunk_count, 1);
    }

    #[test]
    fn repeated_column_accumulates() {
        let mut rng = Rng::new(21);
        let column: Vec<f64> = (0..512).map(|_| rng.next_f64()).collect();
        let gamma = default_gamma();
        let scales = NormScales::default();
        let (first, s1) = build_features(&column, &EmaState::default(), 0, &scales, gamma).unwrap();
        let (second, _) = build_features(&column, &s1, 512, &scales, gamma).unwrap();
        let factor = 1.0 + gamma.powi(32);
        for k in 0..N_BINS {
            assert!((second.0[k] - factor * first.0[k]).abs() < 1e-12 * first.0[k].abs().max(1.0));
        }
    }

    #[test]
    fn pipeline_is_composition_of_parts() {
        let mut rng = Rng::new(34);
        let column: Vec<f64> = (0..64).map(|_| rng.next_f64() * 0.1).collect();
        let mut scale = [0.0; N_BINS];
        for (k, s) in scale.iter_mut().enumerate() {
            *s = 0.5 + k as f64 * 0.1;
        }
        let scales = NormScales(scale);
        let prev = EmaState {
            reduced: [0.2; N_BINS],
            chunk_count: 1,
        };
        let (fv, state) = build_features(&column, &prev, 96, &scales, 0.8).unwrap();
        let frames = stft_magnitudes(&column, 32, 16).unwrap();
        let reduced = ema_reduce(&frames, 0.8, &prev).unwrap();
        let pos = sinusoidal_embedding(96.0, 8, 1e4).unwrap();
        for k in 0..N_BINS {
            assert!((state.reduced[k] - reduced.reduced[k]).abs() < 1e-12);
            assert!((fv.0[k] - reduced.reduced[k] * scale[k]).abs() < 1e-12);
        }
        assert_eq!(fv.positional(), pos.as_slice());
    }
}
