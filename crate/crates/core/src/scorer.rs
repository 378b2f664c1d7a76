//! Token scorers: the genome encoding, a per-token residual MLP, and the
//! backward-masked attention model (BAM), in which each token attends only
//! to itself and to tokens that entered the cache after it.
//!
//! # Genome layout
//!
//! Parameters are stored flat, each matrix row-major with shape
//! `(inputs, outputs)` so a row vector `x` maps to `x·W + b`.
//!
//! BAM (2124 values): `Wq 25x16, bq 16, Wk 25x16, bk 16, Wv 25x16, bv 16,
//! Wo 16x50, bo 50, Wfinal 25, bfinal 1`.
//!
//! MLP (1326 values): `W1 25x25, b1 25, W2 25x25, b2 25, Wfinal 25, bfinal 1`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::binio::{LeReader, LeWriter};
use crate::error::{NammError, Result};
use crate::numerics::{dot, matmul, masked_softmax_row, Mask, Matrix};
use crate::spectrogram::{NormScales, FEATURE_DIM, N_BINS};

/// BAM attention width.
pub const BAM_HIDDEN: usize = 16;
/// BAM attention output width, split into residual and gating halves.
pub const BAM_OUT: usize = 2 * FEATURE_DIM;
/// MLP hidden width.
pub const MLP_HIDDEN: usize = FEATURE_DIM;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchId {
    Mlp,
    Bam,
}

impl ArchId {
    pub fn code(self) -> u32 {
        match self {
            ArchId::Mlp => 0,
            ArchId::Bam => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(ArchId::Mlp),
            1 => Ok(ArchId::Bam),
            other => Err(NammError::invalid(format!("unknown architecture id {other}"))),
        }
    }
}

/// Exact parameter count of the canonical layout.
pub fn param_count(arch: ArchId) -> usize {
    let d = FEATURE_DIM;
    match arch {
        ArchId::Bam => 3 * (d * BAM_HIDDEN + BAM_HIDDEN) + (BAM_HIDDEN * BAM_OUT + BAM_OUT) + (d + 1),
        ArchId::Mlp => 2 * (d * MLP_HIDDEN + MLP_HIDDEN) + (MLP_HIDDEN + 1),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Genome {
    pub arch: ArchId,
    pub params: Vec<f64>,
}

impl Genome {
    pub fn new(arch: ArchId, params: Vec<f64>) -> Result<Self> {
        let expected = param_count(arch);
        if params.len() != expected {
            return Err(NammError::shape(format!(
                "{arch:?} genome needs {expected} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: ArchId) -> Self {
        Self {
            arch,
            params: vec![0.0; param_count(arch)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `(inputs, outputs)`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    fn take(params: &mut &[f64], inputs: usize, outputs: usize) -> Self {
        let (w, rest) = params.split_at(inputs * outputs);
        let (b, rest) = rest.split_at(outputs);
        *params = rest;
        Self {
            weight: Matrix::from_vec(inputs, outputs, w.to_vec()).expect("sizes agree"),
            bias: b.to_vec(),
        }
    }

    fn put(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weight.data());
        out.extend_from_slice(&self.bias);
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = matmul(x, &self.weight).expect("linear input width");
        y.add_row_vector(&self.bias);
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BamWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub final_w: Vec<f64>,
    pub final_b: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights {
    pub hidden1: Linear,
    pub hidden2: Linear,
    pub final_w: Vec<f64>,
    pub final_b: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelWeights {
    Mlp(MlpWeights),
    Bam(BamWeights),
}

pub fn decode_genome(genome: &Genome) -> Result<ModelWeights> {
    let expected = param_count(genome.arch);
    if genome.params.len() != expected {
        return Err(NammError::shape(format!(
            "{:?} genome needs {expected} parameters, got {}",
            genome.arch,
            genome.params.len()
        )));
    }
    let mut p: &[f64] = &genome.params;
    let d = FEATURE_DIM;
    let weights = match genome.arch {
        ArchId::Bam => {
            let query = Linear::take(&mut p, d, BAM_HIDDEN);
            let key = Linear::take(&mut p, d, BAM_HIDDEN);
            let value = Linear::take(&mut p, d, BAM_HIDDEN);
            let out = Linear::take(&mut p, BAM_HIDDEN, BAM_OUT);
            let final_w = p[..d].to_vec();
            let final_b = p[d];
            ModelWeights::Bam(BamWeights {
                query,
                key,
                value,
                out,
                final_w,
                final_b,
            })
        }
        ArchId::Mlp => {
            let hidden1 = Linear::take(&mut p, d, MLP_HIDDEN);
            let hidden2 = Linear::take(&mut p, MLP_HIDDEN, MLP_HIDDEN);
            let final_w = p[..MLP_HIDDEN].to_vec();
            let final_b = p[MLP_HIDDEN];
            ModelWeights::Mlp(MlpWeights {
                hidden1,
                hidden2,
                final_w,
                final_b,
            })
        }
    };
    Ok(weights)
}

pub fn encode_genome(weights: &ModelWeights) -> Genome {
    let mut params = Vec::new();
    let arch = match weights {
        ModelWeights::Bam(w) => {
            w.query.put(&mut params);
            w.key.put(&mut params);
            w.value.put(&mut params);
            w.out.put(&mut params);
            params.extend_from_slice(&w.final_w);
            params.push(w.final_b);
            ArchId::Bam
        }
        ModelWeights::Mlp(w) => {
            w.hidden1.put(&mut params);
            w.hidden2.put(&mut params);
            params.extend_from_slice(&w.final_w);
            params.push(w.final_b);
            ArchId::Mlp
        }
    };
    Genome { arch, params }
}

/// Counter-causal mask over tokens ordered oldest to newest: token `i` may
/// attend to `j` iff `j >= i`.
pub fn backward_mask(n: usize) -> Mask {
    Mask::from_fn(n, n, |i, j| j >= i)
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn check_features(features: &Matrix) -> Result<()> {
    if features.cols() != FEATURE_DIM {
        return Err(NammError::shape(format!(
            "features have {} columns, expected {FEATURE_DIM}",
            features.cols()
        )));
    }
    Ok(())
}

/// BAM scores. Single-head attention under [`backward_mask`]; the `2·25`
/// wide output splits into a residual half `r` and a gate half `m`, then
/// `h = (x + r) ⊙ relu(m)` and `s = h·w_final + b_final`.
pub fn score_bam(features: &Matrix, w: &BamWeights) -> Result<Vec<f64>> {
    check_features(features)?;
    let n = features.rows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let q = w.query.forward(features);
    let k = w.key.forward(features);
    let v = w.value.forward(features);
    let inv_sqrt = 1.0 / (BAM_HIDDEN as f64).sqrt();

    let mut attended = Matrix::zeros(n, BAM_HIDDEN);
    let mut logits = vec![0.0; n];
    let mut probs = vec![0.0; n];
    for i in 0..n {
        // Only j >= i is ever computed or read.
        for j in i..n {
            logits[j] = dot(q.row(i), k.row(j)) * inv_sqrt;
        }
        masked_softmax_row(&logits[..n], |j| j >= i, &mut probs[..n]);
        let out_row = attended.row_mut(i);
        for j in i..n {
            let p = probs[j];
            for (o, vj) in out_row.iter_mut().zip(v.row(j)) {
                *o += p * vj;
            }
        }
    }
    let o = w.out.forward(&attended);
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let x = features.row(i);
        let row = o.row(i);
        let (r, m) = row.split_at(FEATURE_DIM);
        let mut s = w.final_b;
        for c in 0..FEATURE_DIM {
            s += (x[c] + r[c]) * relu(m[c]) * w.final_w[c];
        }
        scores.push(s);
    }
    Ok(scores)
}

/// Per-token residual MLP scores:
/// `h1 = relu(x W1 + b1) + x`, `h2 = relu(h1 W2 + b2) + h1`, `s = h2·wf + bf`.
pub fn score_mlp(features: &Matrix, w: &MlpWeights) -> Result<Vec<f64>> {
    check_features(features)?;
    let mut h1 = w.hidden1.forward(features);
    h1.data_mut().iter_mut().for_each(|v| *v = relu(*v));
    h1.add_assign(features)?;
    let mut h2 = w.hidden2.forward(&h1);
    h2.data_mut().iter_mut().for_each(|v| *v = relu(*v));
    h2.add_assign(&h1)?;
    Ok((0..features.rows())
        .map(|i| dot(h2.row(i), &w.final_w) + w.final_b)
        .collect())
}

impl ModelWeights {
    pub fn arch(&self) -> ArchId {
        match self {
            ModelWeights::Mlp(_) => ArchId::Mlp,
            ModelWeights::Bam(_) => ArchId::Bam,
        }
    }

    pub fn score(&self, features: &Matrix) -> Result<Vec<f64>> {
        match self {
            ModelWeights::Mlp(w) => score_mlp(features, w),
            ModelWeights::Bam(w) => score_bam(features, w),
        }
    }
}

const GENOME_MAGIC: &[u8; 4] = b"NAMM";
const GENOME_VERSION: u32 = 1;

/// A scorer with its frozen feature scales and eviction threshold offset:
/// the unit persisted in genome files.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryModel {
    pub genome: Genome,
    pub scales: NormScales,
    /// Added to every score before the `s >= 0` retention test.
    pub threshold_offset: f64,
}

impl MemoryModel {
    pub fn new(genome: Genome, scales: NormScales) -> Self {
        Self {
            genome,
            scales,
            threshold_offset: 0.0,
        }
    }

    /// Writes the genome file: magic `NAMM`, u32 version, u32 arch id,
    /// u32 parameter count, u32 feature width, then little-endian f64
    /// parameters, the 17 scales, and the threshold offset.
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut out = LeWriter::new(w);
        out.bytes(GENOME_MAGIC)?;
        out.u32(GENOME_VERSION)?;
        out.u32(self.genome.arch.code())?;
        out.u32(self.genome.params.len() as u32)?;
        out.u32(FEATURE_DIM as u32)?;
        out.f64s(&self.genome.params)?;
        out.f64s(&self.scales.0)?;
        out.f64(self.threshold_offset)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut input = LeReader::new(r);
        input.magic(GENOME_MAGIC)?;
        input.expect_u32("genome version", GENOME_VERSION)?;
        let at = input.offset();
        let arch = ArchId::from_code(input.u32()?)
            .map_err(|e| NammError::format(at, e.to_string()))?;
        input.expect_u32("parameter count", param_count(arch) as u32)?;
        input.expect_u32("feature width", FEATURE_DIM as u32)?;
        let params = input.f64s(param_count(arch))?;
        let scales: [f64; N_BINS] = input.f64s(N_BINS)?.try_into().expect("N_BINS values");
        let threshold_offset = input.f64()?;
        Ok(Self {
            genome: Genome { arch, params },
            scales: NormScales(scales),
            threshold_offset,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{masked_softmax, matmul_bt, Rng};
    use proptest::prelude::*;

    fn random_genome(arch: ArchId, rng: &mut Rng, scale: f64) -> Genome {
        Genome::new(arch, (0..param_count(arch)).map(|_| rng.next_normal() * scale).collect())
            .unwrap()
    }

    fn random_features(rng: &mut Rng, n: usize) -> Matrix {
        Matrix::from_fn(n, FEATURE_DIM, |_, _| rng.next_normal())
    }

    fn bam(g: &Genome) -> BamWeights {
        match decode_genome(g).unwrap() {
            ModelWeights::Bam(w) => w,
            _ => unreachable!(),
        }
    }

    fn mlp(g: &Genome) -> MlpWeights {
        match decode_genome(g).unwrap() {
            ModelWeights::Mlp(w) => w,
            _ => unreachable!(),
        }
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(param_count(ArchId::Bam), 2124);
        assert_eq!(param_count(ArchId::Mlp), 1326);
    }

    #[test]
    fn zero_genome_decodes_to_zero_weights() {
        let w = bam(&Genome::zeros(ArchId::Bam));
        assert!(w.query.weight.data().iter().all(|&v| v == 0.0));
        assert_eq!(w.final_b, 0.0);
    }

    #[test]
    fn one_hot_genome_sets_one_weight() {
        let mut g = Genome::zeros(ArchId::Bam);
        // First entry of Wk: after Wq (400) and bq (16).
        g.params[416] = 1.0;
        let w = bam(&g);
        assert_eq!(w.key.weight[(0, 0)], 1.0);
        assert_eq!(w.key.weight.data().iter().filter(|&&v| v != 0.0).count(), 1);
        assert!(w.query.weight.data().iter().all(|&v| v == 0.0));
        let mut g = Genome::zeros(ArchId::Bam);
        *g.params.last_mut().unwrap() = 2.0;
        assert_eq!(bam(&g).final_b, 2.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let g = Genome {
            arch: ArchId::Mlp,
            params: vec![0.0; 10],
        };
        assert!(decode_genome(&g).is_err());
        assert!(Genome::new(ArchId::Bam, vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn genome_round_trip(seed in any::<u64>(), bam_arch in any::<bool>()) {
            let arch = if bam_arch { ArchId::Bam } else { ArchId::Mlp };
            let g = random_genome(arch, &mut Rng::new(seed), 1.0);
            prop_assert_eq!(encode_genome(&decode_genome(&g).unwrap()), g);
        }

        #[test]
        fn genome_file_round_trip(seed in any::<u64>(), offset in -10.0f64..10.0) {
            let mut rng = Rng::new(seed);
            let g = random_genome(ArchId::Bam, &mut rng, 1.0);
            let mut scales = [0.0; N_BINS];
            scales.iter_mut().for_each(|s| *s = rng.next_f64() + 0.1);
            let model = MemoryModel { genome: g, scales: NormScales(scales), threshold_offset: offset };
            let mut buf = Vec::new();
            model.write_to(&mut buf).unwrap();
            let back = MemoryModel::read_from(buf.as_slice()).unwrap();
            prop_assert_eq!(back, model);
        }
    }

    #[test]
    fn genome_file_errors_carry_offsets() {
        let model = MemoryModel::new(Genome::zeros(ArchId::Mlp), NormScales::default());
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(MemoryModel::read_from(bad.as_slice()), Err(NammError::Format { offset: 0, .. })));
        let mut bad = buf.clone();
        bad[12] = 7;
        assert!(matches!(MemoryModel::read_from(bad.as_slice()), Err(NammError::Format { offset: 12, .. })));
        assert!(matches!(
            MemoryModel::read_from(&buf[..buf.len() - 3]),
            Err(NammError::Format { .. })
        ));
    }

    #[test]
    fn backward_mask_shapes() {
        assert!(backward_mask(1).get(0, 0));
        let m = backward_mask(3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), j >= i);
            }
        }
        assert_eq!(m.transpose(), Mask::causal(3));
    }

    #[test]
    fn zero_weights_score_zero() {
        let mut rng = Rng::new(1);
        let x = random_features(&mut rng, 5);
        let s = score_bam(&x, &bam(&Genome::zeros(ArchId::Bam))).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
        let s = score_mlp(&x, &mlp(&Genome::zeros(ArchId::Mlp))).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_bam_depends_on_itself_only() {
        let mut rng = Rng::new(2);
        let w = bam(&random_genome(ArchId::Bam, &mut rng, 0.3));
        let x = random_features(&mut rng, 4);
        let all = score_bam(&x, &w).unwrap();
        let last = Matrix::from_vec(1, FEATURE_DIM, x.row(3).to_vec()).unwrap();
        assert_eq!(score_bam(&last, &w).unwrap()[0].to_bits(), all[3].to_bits());
    }

    #[test]
    fn bam_matches_step_by_step_composition() {
        let mut rng = Rng::new(3);
        let w = bam(&random_genome(ArchId::Bam, &mut rng, 0.3));
        let x = random_features(&mut rng, 3);
        let q = w.query.forward(&x);
        let k = w.key.forward(&x);
        let v = w.value.forward(&x);
        let mut logits = matmul_bt(&q, &k).unwrap();
        logits.scale(0.25);
        let a = masked_softmax(&logits, &backward_mask(3)).unwrap();
        let o = w.out.forward(&matmul(&a, &v).unwrap());
        let got = score_bam(&x, &w).unwrap();
        for i in 0..3 {
            let mut s = w.final_b;
            for c in 0..FEATURE_DIM {
                let h = (x[(i, c)] + o[(i, c)]) * o[(i, FEATURE_DIM + c)].max(0.0);
                s += h * w.final_w[c];
            }
            assert!((got[i] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn bam_ignores_older_tokens() {
        let mut rng = Rng::new(4);
        for _ in 0..20 {
            let w = bam(&random_genome(ArchId::Bam, &mut rng, 0.5));
            let x = random_features(&mut rng, 8);
            let base = score_bam(&x, &w).unwrap();
            for j in 0..8 {
                let mut y = x.clone();
                for c in 0..FEATURE_DIM {
                    y[(j, c)] += rng.next_normal();
                }
                let s = score_bam(&y, &w).unwrap();
                for i in j + 1..8 {
                    assert_eq!(s[i].to_bits(), base[i].to_bits());
                }
            }
        }
    }

    #[test]
    fn bam_reversal_with_transposed_mask() {
        // Reversing the tokens under the causal mask is the same computation
        // as the backward mask on the original order.
        let mut rng = Rng::new(5);
        let w = bam(&random_genome(ArchId::Bam, &mut rng, 0.4));
        let x = random_features(&mut rng, 6);
        let fwd = score_bam(&x, &w).unwrap();
        let n = 6;
        let rev = Matrix::from_fn(n, FEATURE_DIM, |i, c| x[(n - 1 - i, c)]);
        let q = w.query.forward(&rev);
        let k = w.key.forward(&rev);
        let v = w.value.forward(&rev);
        let mut logits = matmul_bt(&q, &k).unwrap();
        logits.scale(0.25);
        let a = masked_softmax(&logits, &backward_mask(n).transpose()).unwrap();
        let o = w.out.forward(&matmul(&a, &v).unwrap());
        for i in 0..n {
            let mut s = w.final_b;
            for c in 0..FEATURE_DIM {
                s += (rev[(i, c)] + o[(i, c)]) * o[(i, FEATURE_DIM + c)].max(0.0) * w.final_w[c];
            }
            assert!((s - fwd[n - 1 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_matches_unrolled_oracle_and_is_permutation_equivariant() {
        let mut rng = Rng::new(6);
        let w = mlp(&random_genome(ArchId::Mlp, &mut rng, 0.3));
        let x = random_features(&mut rng, 5);
        let s = score_mlp(&x, &w).unwrap();
        for i in 0..5 {
            let xi = x.row(i);
            let mut h1 = [0.0; FEATURE_DIM];
            for o in 0..FEATURE_DIM {
                let mut a = w.hidden1.bias[o];
                for c in 0..FEATURE_DIM {
                    a += xi[c] * w.hidden1.weight[(c, o)];
                }
                h1[o] = a.max(0.0) + xi[o];
            }
            let mut out = w.final_b;
            for o in 0..FEATURE_DIM {
                let mut a = w.hidden2.bias[o];
                for c in 0..FEATURE_DIM {
                    a += h1[c] * w.hidden2.weight[(c, o)];
                }
                out += (a.max(0.0) + h1[o]) * w.final_w[o];
            }
            assert!((s[i] - out).abs() < 1e-12);
        }
        let perm = [3, 0, 4, 1, 2];
        let px = Matrix::from_fn(5, FEATURE_DIM, |i, c| x[(perm[i], c)]);
        let ps = score_mlp(&px, &w).unwrap();
        for i in 0..5 {
            assert_eq!(ps[i].to_bits(), s[perm[i]].to_bits());
        }
    }
}
