//! Centroids, the scaled-cosine similarity matrix, the GE2E softmax loss
//! (optionally with the outer-attacker term) and its analytic gradients.
//!
//! Rows are not assumed to be exactly unit length: every cosine divides by
//! both norms, so gradients are valid for arbitrary perturbations.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const DEGENERATE: f64 = 1e-8;
/// Lower clamp for the learned similarity scale.
pub const MIN_SCALE: f64 = 1e-6;

/// `N` speakers x `M` utterances x `D` embedding entries.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    data: Array3<f64>,
}

impl EmbeddingBatch {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("embedding batch contains non-finite values"));
        }
        Ok(Self { data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn speakers(&self) -> usize {
        self.data.dim().0
    }

    pub fn utterances(&self) -> usize {
        self.data.dim().1
    }

    pub fn row(&self, j: usize, i: usize) -> ArrayView1<'_, f64> {
        self.data.slice(s![j, i, ..])
    }

    pub fn speaker(&self, j: usize) -> ArrayView2<'_, f64> {
        self.data.slice(s![j, .., ..])
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn is_unit_norm(&self, tol: f64) -> bool {
        self.data
            .lanes(Axis(2))
            .into_iter()
            .all(|r| (r.dot(&r).sqrt() - 1.0).abs() <= tol)
    }

    fn require_trainable(&self) -> Result<()> {
        let (n, m, _) = self.dims();
        if n < 2 {
            return Err(invalid(format!("GE2E needs at least 2 speakers, got {n}")));
        }
        if m < 2 {
            return Err(invalid(format!("GE2E needs at least 2 utterances per speaker, got {m}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub w: f64,
    pub b: f64,
}

impl Default for ScaleParams {
    fn default() -> Self {
        Self { w: 10.0, b: -5.0 }
    }
}

impl ScaleParams {
    pub fn clamp(&mut self) {
        self.w = self.w.max(MIN_SCALE);
    }
}

/// Which softmax denominator and centroid variant to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossOptions {
    /// Include `k = j` in the log-sum-exp (standard GE2E) instead of the
    /// `k != j` form.
    pub include_target: bool,
    /// Score each embedding against its own speaker's leave-one-out centroid.
    pub use_loo: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self { include_target: false, use_loo: true }
    }
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

fn normalized(v: Array1<f64>) -> Result<Array1<f64>> {
    let n = norm(v.view());
    if !(n >= DEGENERATE) {
        return Err(Error::DegenerateNorm { norm: n });
    }
    Ok(v / n)
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b) / (norm(a) * norm(b))
}

/// Normalized mean of the rows.
pub fn centroid(embeddings: ArrayView2<f64>) -> Result<Array1<f64>> {
    if embeddings.nrows() == 0 {
        return Err(invalid("centroid of zero rows"));
    }
    normalized(embeddings.mean_axis(Axis(0)).expect("nonempty"))
}

/// Normalized mean of all rows except `exclude`.
pub fn loo_centroid(embeddings: ArrayView2<f64>, exclude: usize) -> Result<Array1<f64>> {
    let m = embeddings.nrows();
    if m < 2 {
        return Err(invalid(format!("leave-one-out centroid needs at least 2 rows, got {m}")));
    }
    if exclude >= m {
        return Err(invalid(format!("exclude index {exclude} out of range for {m} rows")));
    }
    let sum = embeddings.sum_axis(Axis(0)) - embeddings.row(exclude);
    normalized(sum / (m - 1) as f64)
}

/// `(N*M) x N` matrix, row `j*M + i`, column `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
    pub speakers: usize,
    pub utterances: usize,
    pub params: ScaleParams,
}

impl SimilarityMatrix {
    pub fn get(&self, j: usize, i: usize, k: usize) -> f64 {
        self.values[[j * self.utterances + i, k]]
    }
}

/// Cosines of every embedding with every speaker's centroid, with the
/// own-speaker column replaced by the leave-one-out cosine when requested.
fn cosine_matrix(batch: &EmbeddingBatch, use_loo: bool) -> Result<(Array2<f64>, Array2<f64>)> {
    let (n, m, d) = batch.dims();
    let mut centroids = Array2::zeros((n, d));
    for k in 0..n {
        centroids.row_mut(k).assign(&centroid(batch.speaker(k))?);
    }
    let mut unit = batch.data.to_shape((n * m, d)).expect("contiguous").to_owned();
    for mut r in unit.rows_mut() {
        let len = norm(r.view());
        if !(len >= DEGENERATE) {
            return Err(Error::DegenerateNorm { norm: len });
        }
        r /= len;
    }
    let mut cos = unit.dot(&centroids.t());
    if use_loo {
        for j in 0..n {
            for i in 0..m {
                let c = loo_centroid(batch.speaker(j), i)?;
                cos[[j * m + i, j]] = unit.row(j * m + i).dot(&c);
            }
        }
    }
    Ok((cos, centroids))
}

pub fn similarity_matrix(batch: &EmbeddingBatch, params: ScaleParams, use_loo: bool) -> Result<SimilarityMatrix> {
    let (n, m, _) = batch.dims();
    if use_loo && m < 2 {
        return Err(invalid("leave-one-out similarity needs M >= 2"));
    }
    let (cos, _) = cosine_matrix(batch, use_loo)?;
    Ok(SimilarityMatrix { values: cos.mapv(|c| params.w * c + params.b), speakers: n, utterances: m, params })
}

/// The N attacker embeddings, attacker `l` paired with speaker `l`, and
/// their scaled similarities `w * cos(x_l, c_l) + b` to the full centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackerDiag {
    pub embeddings: Array2<f64>,
    pub similarities: Array1<f64>,
}

pub fn attacker_diag(batch: &EmbeddingBatch, attackers: ArrayView2<f64>, params: ScaleParams) -> Result<AttackerDiag> {
    let n = batch.speakers();
    if attackers.nrows() != n {
        return Err(invalid(format!("{} attacker embeddings for {n} speakers", attackers.nrows())));
    }
    if attackers.ncols() != batch.dims().2 {
        return Err(Error::Shape("attacker embedding dimension mismatch".into()));
    }
    let sims = (0..n)
        .map(|l| Ok(params.w * cosine(attackers.row(l), centroid(batch.speaker(l))?.view()) + params.b))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttackerDiag { embeddings: attackers.to_owned(), similarities: Array1::from(sims) })
}

fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    max + vals.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `sum_{j,i} [ log sum_k exp(S_ji,k) - S_ji,j ]`, where `k` runs over the
/// other speakers, or over all speakers with `include_target`.
pub fn ge2e_loss(sim: &SimilarityMatrix, include_target: bool) -> Result<f64> {
    let (n, m) = (sim.speakers, sim.utterances);
    if n < 2 {
        return Err(invalid(format!("GE2E loss needs at least 2 speakers, got {n}")));
    }
    let mut total = 0.0;
    for j in 0..n {
        for i in 0..m {
            let row = sim.values.row(j * m + i);
            let others = (0..n).filter(|&k| include_target || k != j).map(|k| row[k]);
            total += log_sum_exp(others) - row[j];
        }
    }
    Ok(total)
}

/// GE2E loss minus the attacker diagonal `sum_l S_l,l`.
pub fn outer_loss(sim: &SimilarityMatrix, diag: &AttackerDiag, include_target: bool) -> Result<f64> {
    if diag.similarities.len() != sim.speakers {
        return Err(invalid(format!(
            "{} attacker similarities for {} speakers",
            diag.similarities.len(),
            sim.speakers
        )));
    }
    Ok(ge2e_loss(sim, include_target)? - diag.similarities.sum())
}

#[derive(Debug, Clone, Copy)]
pub enum LossPlan<'a> {
    Benign,
    /// Attacker embeddings, one row per speaker of the batch.
    Outer(ArrayView2<'a, f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub loss: f64,
    /// Same shape as the batch.
    pub embeddings: Array3<f64>,
    /// Present for the outer plan.
    pub attackers: Option<Array2<f64>>,
    pub w: f64,
    pub b: f64,
}

/// `d cos(a, c) / d a` where `a_hat`, `c_hat` are unit and `a_len = |a|`.
fn dcos(a_hat: ArrayView1<f64>, c_hat: ArrayView1<f64>, cos: f64, a_len: f64) -> Array1<f64> {
    (&c_hat - &(&a_hat * cos)) / a_len
}

/// Loss and exact gradients with respect to all embeddings (through the
/// centroids, including leave-one-out paths), attacker embeddings and the
/// scale parameters.
pub fn loss_gradients(batch: &EmbeddingBatch, params: ScaleParams, plan: LossPlan, opts: LossOptions) -> Result<LossGrads> {
    batch.require_trainable()?;
    let (n, m, d) = batch.dims();
    let (w, b) = (params.w, params.b);

    let e_len: Vec<f64> = batch.data.lanes(Axis(2)).into_iter().map(norm).collect();
    let e_hat = |j: usize, i: usize| batch.row(j, i).mapv(|v| v / e_len[j * m + i]);
    // Un-normalized means; cosines are scale-free so they stand in for centroids.
    let sums: Vec<Array1<f64>> = (0..n).map(|k| batch.speaker(k).sum_axis(Axis(0))).collect();
    let means: Vec<Array1<f64>> = sums.iter().map(|s| s / m as f64).collect();
    let mean_len: Vec<f64> = means.iter().map(|v| norm(v.view())).collect();
    if let Some(&bad) = mean_len.iter().find(|&&l| !(l >= DEGENERATE)) {
        return Err(Error::DegenerateNorm { norm: bad });
    }
    let mean_hat: Vec<Array1<f64>> = means.iter().zip(&mean_len).map(|(v, l)| v / *l).collect();

    let mut grad_e = Array3::<f64>::zeros((n, m, d));
    let mut grad_mean = vec![Array1::<f64>::zeros(d); n];
    let mut grad_loo: Vec<Vec<Array1<f64>>> = vec![Vec::with_capacity(m); n];
    let (mut loss, mut gw, mut gb) = (0.0, 0.0, 0.0);

    for j in 0..n {
        for i in 0..m {
            let eh = e_hat(j, i);
            let own = if opts.use_loo {
                let loo = (&sums[j] - &batch.row(j, i)) / (m - 1) as f64;
                let len = norm(loo.view());
                if !(len >= DEGENERATE) {
                    return Err(Error::DegenerateNorm { norm: len });
                }
                Some((loo / len, len))
            } else {
                None
            };
            let target = |k: usize| -> (ArrayView1<f64>, f64) {
                match (&own, k == j) {
                    (Some((hat, len)), true) => (hat.view(), *len),
                    _ => (mean_hat[k].view(), mean_len[k]),
                }
            };
            let cos: Vec<f64> = (0..n).map(|k| eh.dot(&target(k).0)).collect();
            let sim: Vec<f64> = cos.iter().map(|c| w * c + b).collect();
            let pool: Vec<usize> = (0..n).filter(|&k| opts.include_target || k != j).collect();
            let lse = log_sum_exp(pool.iter().map(|&k| sim[k]));
            loss += lse - sim[j];
            let mut g = vec![0.0; n];
            for &k in &pool {
                g[k] = (sim[k] - lse).exp();
            }
            g[j] -= 1.0;
            for k in 0..n {
                gw += g[k] * cos[k];
                gb += g[k];
                let dc = w * g[k];
                let (c_hat, c_len) = target(k);
                grad_e.slice_mut(s![j, i, ..]).scaled_add(dc, &dcos(eh.view(), c_hat, cos[k], e_len[j * m + i]));
                let to_centre = dcos(c_hat, eh.view(), cos[k], c_len) * dc;
                if k == j && own.is_some() {
                    grad_loo[j].push(to_centre);
                } else {
                    grad_mean[k] += &to_centre;
                }
            }
        }
    }

    let attackers = match plan {
        LossPlan::Benign => None,
        LossPlan::Outer(x) => {
            if x.nrows() != n || x.ncols() != d {
                return Err(invalid(format!("attacker block {:?} does not match {n} x {d}", x.dim())));
            }
            let mut gx = Array2::zeros((n, d));
            for l in 0..n {
                let x_len = norm(x.row(l));
                if !(x_len >= DEGENERATE) {
                    return Err(Error::DegenerateNorm { norm: x_len });
                }
                let xh = x.row(l).mapv(|v| v / x_len);
                let c = xh.dot(&mean_hat[l]);
                loss -= w * c + b;
                gw -= c;
                gb -= 1.0;
                gx.row_mut(l).assign(&(dcos(xh.view(), mean_hat[l].view(), c, x_len) * -w));
                grad_mean[l] -= &(dcos(mean_hat[l].view(), xh.view(), c, mean_len[l]) * w);
            }
            Some(gx)
        }
    };

    for j in 0..n {
        let share = &grad_mean[j] / m as f64;
        let loo_total: Array1<f64> = if opts.use_loo {
            grad_loo[j].iter().fold(Array1::zeros(d), |acc, g| acc + g)
        } else {
            Array1::zeros(d)
        };
        #[allow(clippy::needless_range_loop)]
        for i in 0..m {
            let mut row = grad_e.slice_mut(s![j, i, ..]);
            row += &share;
            if opts.use_loo {
                row.scaled_add(1.0 / (m - 1) as f64, &(&loo_total - &grad_loo[j][i]));
            }
        }
    }

    Ok(LossGrads { loss, embeddings: grad_e, attackers, w: gw, b: gb })
}
