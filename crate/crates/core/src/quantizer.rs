//! Whole-sequence quantization against action-generated codeword trajectories, and the
//! training losses built around it.

use ndarray::{s, Array2};

use crate::autodiff::{Tape, Var};
use crate::codebook::{ActionId, Codebook};
use crate::error::{GcqError, Result};
use crate::exact::exact_sum;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Squared L2 distance summed over the whole sequence.
    L2,
    /// Largest inner product; only defined for single-frame sequences.
    InnerProduct,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::L2 => "l2",
            Metric::InnerProduct => "inner_product",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "l2" => Some(Metric::L2),
            "inner_product" => Some(Metric::InnerProduct),
            _ => None,
        }
    }
}

/// Per-factor diagnostics of one quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeReport {
    /// Squared distance of the chosen trajectory (L2), or its negated inner product.
    pub distances: Vec<f64>,
    /// Runner-up score minus chosen score; infinite when K = 1.
    pub gaps: Vec<f64>,
    /// Mean squared difference between latents and their quantized values.
    pub commitment: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    /// `n x D` quantized latents, factor blocks concatenated per row.
    pub s_hat: Array2<f64>,
    /// Chosen base index per factor.
    pub bases: Vec<usize>,
    /// Codeword index per factor and step.
    pub indices: Vec<Vec<usize>>,
    pub report: QuantizeReport,
}

/// Column offset of each factor block in a latent row.
pub fn factor_offsets(codebook: &Codebook) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(codebook.m() + 1);
    let mut acc = 0;
    offsets.push(0);
    for f in codebook.factors() {
        acc += f.dim();
        offsets.push(acc);
    }
    offsets
}

/// Quantizes an `n x D` latent sequence. Each factor picks the base whose trajectory
/// under `actions` is closest to its block of `s`; ties go to the lowest base.
pub fn quantize(s: &Array2<f64>, actions: &[ActionId], codebook: &Codebook, metric: Metric) -> Result<Quantized> {
    let n = s.nrows();
    if n == 0 {
        return Err(GcqError::InvalidParameter {
            name: "sequence length",
            reason: "need at least one step".into(),
        });
    }
    if s.ncols() != codebook.latent_dim() {
        return Err(GcqError::DimensionMismatch {
            context: "latent width",
            expected: codebook.latent_dim(),
            found: s.ncols(),
        });
    }
    if actions.len() + 1 != n {
        return Err(GcqError::DimensionMismatch {
            context: "action count",
            expected: n - 1,
            found: actions.len(),
        });
    }
    if metric == Metric::InnerProduct && n != 1 {
        return Err(GcqError::InvalidParameter {
            name: "metric",
            reason: "inner-product matching is only defined for sequence length 1".into(),
        });
    }
    let moves = actions
        .iter()
        .map(|&a| codebook.action_map().moves(a))
        .collect::<Result<Vec<_>>>()?;
    let offsets = factor_offsets(codebook);
    let mut s_hat = Array2::zeros(s.dim());
    let mut bases = Vec::with_capacity(codebook.m());
    let mut indices = Vec::with_capacity(codebook.m());
    let mut distances = Vec::with_capacity(codebook.m());
    let mut gaps = Vec::with_capacity(codebook.m());
    for (j, f) in codebook.factors().iter().enumerate() {
        let block = s.slice(s![.., offsets[j]..offsets[j + 1]]);
        let k = f.len();
        // Codeword index reached at step t from every base.
        let mut reach: Vec<Vec<usize>> = Vec::with_capacity(n);
        reach.push((0..k).collect());
        for mv in &moves {
            let prev = reach.last().unwrap();
            reach.push(prev.iter().map(|&i| f.roll(i, mv[j])).collect());
        }
        let scores: Vec<f64> = match metric {
            Metric::L2 => {
                let norms: Vec<f64> = f.codewords().iter().map(|e| e.iter().map(|x| x * x).sum()).collect();
                let s_norm: f64 = block.iter().map(|x| x * x).sum();
                let mut acc = vec![s_norm; k];
                for (t, row) in block.rows().into_iter().enumerate() {
                    let dots: Vec<f64> = f
                        .codewords()
                        .iter()
                        .map(|e| e.iter().zip(row.iter()).map(|(a, b)| a * b).sum())
                        .collect();
                    for (i, a) in acc.iter_mut().enumerate() {
                        let c = reach[t][i];
                        *a += norms[c] - 2.0 * dots[c];
                    }
                }
                acc
            }
            Metric::InnerProduct => {
                let row = block.row(0);
                f.codewords()
                    .iter()
                    .map(|e| -exact_sum(e.iter().zip(row.iter()).map(|(a, b)| a * b)))
                    .collect()
            }
        };
        let mut best = 0;
        for (i, &sc) in scores.iter().enumerate() {
            if sc < scores[best] {
                best = i;
            }
        }
        let runner_up = scores
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != best)
            .map(|(_, &sc)| sc)
            .fold(f64::INFINITY, f64::min);
        let path: Vec<usize> = reach.iter().map(|r| r[best]).collect();
        for (t, &c) in path.iter().enumerate() {
            s_hat
                .slice_mut(s![t, offsets[j]..offsets[j + 1]])
                .iter_mut()
                .zip(f.codeword(c))
                .for_each(|(dst, &v)| *dst = v);
        }
        let chosen = match metric {
            Metric::L2 => {
                let direct: f64 = block
                    .iter()
                    .zip(s_hat.slice(s![.., offsets[j]..offsets[j + 1]]).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                direct
            }
            Metric::InnerProduct => scores[best],
        };
        distances.push(chosen);
        gaps.push(runner_up - scores[best]);
        bases.push(best);
        indices.push(path);
    }
    let commitment = mean_squared_difference(s, &s_hat);
    Ok(Quantized {
        s_hat,
        bases,
        indices,
        report: QuantizeReport {
            distances,
            gaps,
            commitment,
        },
    })
}

fn mean_squared_difference(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// `mean (o - o_hat)^2 + beta * mean (s - s_hat)^2`.
pub fn gcq_loss(o: &Array2<f64>, o_hat: &Array2<f64>, s: &Array2<f64>, s_hat: &Array2<f64>, beta: f64) -> Result<f64> {
    check_same(o, o_hat, "reconstruction shape")?;
    check_same(s, s_hat, "latent shape")?;
    Ok(mean_squared_difference(o, o_hat) + beta * mean_squared_difference(s, s_hat))
}

/// [`gcq_loss`] plus the codebook term `gamma * mean (sg[s] - s_hat)^2`.
#[allow(clippy::too_many_arguments)]
pub fn gcq_loss_learnable(
    o: &Array2<f64>,
    o_hat: &Array2<f64>,
    s: &Array2<f64>,
    s_hat: &Array2<f64>,
    beta: f64,
    gamma: f64,
    codebook: &Codebook,
) -> Result<f64> {
    if !codebook.is_learnable() {
        return Err(GcqError::LearnableFlagMismatch { expected: true });
    }
    Ok(gcq_loss(o, o_hat, s, s_hat, beta)? + gamma * mean_squared_difference(s, s_hat))
}

fn check_same(a: &Array2<f64>, b: &Array2<f64>, context: &'static str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(GcqError::DimensionMismatch {
            context,
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

/// Loss nodes recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Var,
    pub reconstruction: Var,
    pub commitment: Var,
    pub codebook: Option<Var>,
}

/// Records the training loss. `s_hat` enters the commitment term as a constant.
pub fn gcq_loss_graph(tape: &mut Tape, o: Var, o_hat: Var, s: Var, s_hat: &Array2<f64>, beta: f64) -> LossNodes {
    let diff = tape.sub(o, o_hat);
    let reconstruction = tape.mean_squares(diff);
    let target = tape.leaf(s_hat.clone());
    let target = tape.stop_gradient(target);
    let cdiff = tape.sub(s, target);
    let commitment = tape.mean_squares(cdiff);
    let weighted = tape.scale(commitment, beta);
    let total = tape.add(reconstruction, weighted);
    LossNodes {
        total,
        reconstruction,
        commitment,
        codebook: None,
    }
}

/// Adds `gamma * mean (sg[s] - s_hat)^2` where `s_hat` is a differentiable function of
/// the codewords.
pub fn add_codebook_term(tape: &mut Tape, loss: LossNodes, s: Var, s_hat: Var, gamma: f64) -> LossNodes {
    let frozen = tape.stop_gradient(s);
    let diff = tape.sub(frozen, s_hat);
    let term = tape.mean_squares(diff);
    let weighted = tape.scale(term, gamma);
    let total = tape.add(loss.total, weighted);
    LossNodes {
        total,
        codebook: Some(term),
        ..loss
    }
}

/// Records `s_hat` rows as rolls of each factor's prototype. `indices[r][j]` is the
/// codeword of factor `j` used in row `r`; `prototypes[j]` are `1 x d_j` leaves.
pub fn learnable_quantized_graph(
    tape: &mut Tape,
    codebook: &Codebook,
    prototypes: &[Var],
    indices: &[Vec<usize>],
) -> Result<Var> {
    if !codebook.is_learnable() {
        return Err(GcqError::LearnableFlagMismatch { expected: true });
    }
    let parts: Vec<Var> = codebook
        .factors()
        .iter()
        .enumerate()
        .map(|(j, f)| {
            let n = f.params.neurons_per_axis;
            let shifts = indices
                .iter()
                .map(|row| match f.topology() {
                    crate::attractor::Topology::Ring => (row[j] as i64, 0),
                    crate::attractor::Topology::Torus => ((row[j] / n) as i64, (row[j] % n) as i64),
                })
                .collect();
            tape.roll_gather(prototypes[j], f.topology(), n, shifts)
        })
        .collect();
    Ok(tape.concat_cols(&parts))
}
