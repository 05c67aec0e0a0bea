//! Training objective: batch-based classification loss over query–target
//! scores, factor-orthogonal regularization of the token matrices, and
//! their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::{flatten_tokens, TokenMatrix, TokenMatrixIds};
use crate::numerics::{Graph, Tensor, TensorId};

/// Loss hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Softmax temperature: logits are `score / temperature`.
    pub temperature: f64,
    /// Weight of the orthogonal regularizer.
    pub lambda: f64,
    pub batch_size: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { temperature: 10.0, lambda: 0.1, batch_size: 32 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_batch(queries: usize, targets: usize) -> Result<()> {
    if queries == 0 || queries != targets {
        return Err(Error::dim(
            "ranking_loss",
            format!("batch sizes differ or empty: {queries} queries vs {targets} targets"),
        ));
    }
    Ok(())
}

/// In-graph batch classification loss: the diagonal pairs are positives,
/// every other in-batch target is a negative.
///
/// `mean_i( -log softmax_j( s(q_i, t_j) / temperature )[i] )`
pub fn ranking_loss_graph(
    g: &mut Graph,
    queries: &[TokenMatrixIds],
    targets: &[TokenMatrixIds],
    temperature: f64,
) -> Result<TensorId> {
    check_batch(queries.len(), targets.len())?;
    let scores = score_matrix_graph(g, queries, targets)?;
    ranking_loss_from_score_ids(g, scores, temperature)
}

/// In-graph score matrix `[B, B]`: entry (i, j) is the flattened inner
/// product of normalized query i and target j.
pub fn score_matrix_graph(
    g: &mut Graph,
    queries: &[TokenMatrixIds],
    targets: &[TokenMatrixIds],
) -> Result<TensorId> {
    check_batch(queries.len(), targets.len())?;
    let q_flat: Vec<TensorId> =
        queries.iter().map(|q| flatten_tokens(g, q)).collect::<Result<_>>()?;
    let t_flat: Vec<TensorId> =
        targets.iter().map(|t| flatten_tokens(g, t)).collect::<Result<_>>()?;
    let q_mat = g.concat_cols(&q_flat)?;
    let t_mat = g.concat_cols(&t_flat)?;
    let q_t = g.transpose(q_mat)?;
    g.matmul(q_t, t_mat)
}

fn ranking_loss_from_score_ids(
    g: &mut Graph,
    scores: TensorId,
    temperature: f64,
) -> Result<TensorId> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let logits = g.scale(scores, 1.0 / temperature);
    let lse = g.logsumexp_rows(logits)?;
    let positives = g.diag(logits)?;
    let per_query = g.sub(lse, positives)?;
    Ok(g.mean_all(per_query))
}

/// In-graph factor-orthogonal regularizer:
/// `(1/B) Σ_i (‖Ψ̂_qiᵀΨ̂_qi − I‖_F² + ‖Ψ̂_tiᵀΨ̂_ti − I‖_F²)`.
pub fn ortho_loss_graph(
    g: &mut Graph,
    queries: &[TokenMatrixIds],
    targets: &[TokenMatrixIds],
) -> Result<TensorId> {
    check_batch(queries.len(), targets.len())?;
    let u = queries[0].count;
    let eye = g.constant(Tensor::eye(u));
    let mut terms: Vec<TensorId> = Vec::with_capacity(2 * queries.len());
    for tm in queries.iter().chain(targets.iter()) {
        if tm.count != u {
            return Err(Error::dim("ortho_loss", "token counts differ within batch".to_string()));
        }
        let t = g.transpose(tm.normalized)?;
        let gram = g.matmul(t, tm.normalized)?;
        let dev = g.sub(gram, eye)?;
        let sq = g.mul(dev, dev)?;
        terms.push(g.sum_all(sq));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, 1.0 / queries.len() as f64))
}

/// In-graph combined objective: `ranking + lambda * ortho`. With
/// `lambda = 0` the regularizer is not built at all.
pub fn total_loss_graph(
    g: &mut Graph,
    queries: &[TokenMatrixIds],
    targets: &[TokenMatrixIds],
    cfg: &LossConfig,
) -> Result<TensorId> {
    cfg.validate()?;
    let ranking = ranking_loss_graph(g, queries, targets, cfg.temperature)?;
    if cfg.lambda == 0.0 {
        return Ok(ranking);
    }
    let ortho = ortho_loss_graph(g, queries, targets)?;
    let weighted = g.scale(ortho, cfg.lambda);
    g.add(ranking, weighted)
}

fn as_ids(g: &mut Graph, matrices: &[TokenMatrix]) -> Vec<TokenMatrixIds> {
    matrices
        .iter()
        .map(|m| {
            let raw = g.constant(m.raw().clone());
            let normalized = g.constant(m.normalized().clone());
            TokenMatrixIds { raw, normalized, count: m.token_count() }
        })
        .collect()
}

/// Detached-value ranking loss over already-aggregated token matrices.
pub fn ranking_loss(
    queries: &[TokenMatrix],
    targets: &[TokenMatrix],
    cfg: &LossConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let q = as_ids(&mut g, queries);
    let t = as_ids(&mut g, targets);
    let loss = ranking_loss_graph(&mut g, &q, &t, cfg.temperature)?;
    Ok(g.value(loss).data()[0])
}

/// Detached-value orthogonal regularizer.
pub fn ortho_loss(queries: &[TokenMatrix], targets: &[TokenMatrix]) -> Result<f64> {
    let mut g = Graph::new();
    let q = as_ids(&mut g, queries);
    let t = as_ids(&mut g, targets);
    let loss = ortho_loss_graph(&mut g, &q, &t)?;
    Ok(g.value(loss).data()[0])
}

/// Detached-value combined objective.
pub fn total_loss(
    queries: &[TokenMatrix],
    targets: &[TokenMatrix],
    cfg: &LossConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let q = as_ids(&mut g, queries);
    let t = as_ids(&mut g, targets);
    let loss = total_loss_graph(&mut g, &q, &t, cfg)?;
    Ok(g.value(loss).data()[0])
}

/// Ranking loss straight from a `[B, B]` score matrix. Independent of the
/// token-matrix plumbing; used as the oracle route in tests.
pub fn ranking_loss_from_scores(scores: &Tensor, temperature: f64) -> Result<f64> {
    if !scores.is_matrix() || scores.rows() != scores.cols() || scores.rows() == 0 {
        return Err(Error::dim(
            "ranking_loss",
            format!("expected square score matrix, got {:?}", scores.shape()),
        ));
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let b = scores.rows();
    let mut total = 0.0;
    for i in 0..b {
        let row: Vec<f64> = (0..b).map(|j| scores.at2(i, j) / temperature).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[i];
    }
    Ok(total / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tm(d: usize, u: usize, seed: u64) -> TokenMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenMatrix::from_raw(Tensor::uniform(&[d, u], -1.0, 1.0, &mut rng)).unwrap()
    }

    fn basis_tm(d: usize, offsets: &[usize]) -> TokenMatrix {
        let mut raw = Tensor::zeros(&[d, offsets.len()]);
        for (c, &r) in offsets.iter().enumerate() {
            raw.set2(r, c, 1.0);
        }
        TokenMatrix::from_raw(raw).unwrap()
    }

    #[test]
    fn single_sample_batch_has_exactly_zero_loss() {
        let q = vec![random_tm(8, 4, 1)];
        let t = vec![random_tm(8, 4, 2)];
        let cfg = LossConfig { temperature: 10.0, lambda: 0.0, batch_size: 1 };
        assert_eq!(ranking_loss(&q, &t, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn all_equal_scores_give_ln_b() {
        // Identical queries and targets: every score in the matrix is equal.
        let tm = random_tm(8, 4, 3);
        let q = vec![tm.clone(), tm.clone()];
        let t = vec![tm.clone(), tm];
        let cfg = LossConfig::default();
        let loss = ranking_loss(&q, &t, &cfg).unwrap();
        assert!((loss - 2.0f64.ln()).abs() <= 1e-12, "loss {loss}");
    }

    #[test]
    fn diagonal_ten_score_matrix_matches_closed_form() {
        // Score matrix [[10, 0], [0, 10]] at temperature 10:
        // loss = -ln(e / (e + 1)).
        let q1 = basis_tm(20, &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let q2 = basis_tm(20, &[10, 11, 12, 13, 14, 15, 16, 17, 18, 19]);
        let expected = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();

        let queries = vec![q1.clone(), q2.clone()];
        let targets = vec![q1, q2];
        let cfg = LossConfig { temperature: 10.0, lambda: 0.0, batch_size: 2 };
        let loss = ranking_loss(&queries, &targets, &cfg).unwrap();
        assert!((loss - expected).abs() <= 1e-12, "loss {loss} vs {expected}");

        // Oracle route: straight from the score matrix.
        let scores = Tensor::new(&[2, 2], vec![10.0, 0.0, 0.0, 10.0]).unwrap();
        let direct = ranking_loss_from_scores(&scores, 10.0).unwrap();
        assert!((direct - expected).abs() <= 1e-12);
    }

    #[test]
    fn graph_route_equals_score_matrix_route() {
        let queries: Vec<TokenMatrix> = (0..5).map(|i| random_tm(8, 3, 40 + i)).collect();
        let targets: Vec<TokenMatrix> = (0..5).map(|i| random_tm(8, 3, 50 + i)).collect();
        let cfg = LossConfig { temperature: 7.0, lambda: 0.0, batch_size: 5 };
        let via_graph = ranking_loss(&queries, &targets, &cfg).unwrap();
        let mut scores = Tensor::zeros(&[5, 5]);
        for i in 0..5 {
            for j in 0..5 {
                scores.set2(i, j, crate::matcher::match_score(&queries[i], &targets[j]).unwrap());
            }
        }
        let via_scores = ranking_loss_from_scores(&scores, 7.0).unwrap();
        assert!((via_graph - via_scores).abs() <= 1e-12);
    }

    #[test]
    fn ranking_loss_is_row_shift_invariant_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..20 {
            let b = 4;
            let scores = Tensor::uniform(&[b, b], -5.0, 5.0, &mut rng);
            let loss = ranking_loss_from_scores(&scores, 10.0).unwrap();
            assert!(loss >= 0.0);
            let mut shifted = scores.clone();
            for i in 0..b {
                let c = (i as f64 + 1.0) * 0.7;
                for j in 0..b {
                    shifted.set2(i, j, scores.at2(i, j) + c);
                }
            }
            let shifted_loss = ranking_loss_from_scores(&shifted, 10.0).unwrap();
            assert!((loss - shifted_loss).abs() <= 1e-12);
        }
    }

    #[test]
    fn ortho_loss_closed_forms() {
        // Orthonormal columns on both sides: exactly zero.
        let ortho_q = basis_tm(6, &[0, 1]);
        let ortho_t = basis_tm(6, &[2, 3]);
        assert_eq!(ortho_loss(&[ortho_q.clone()], &[ortho_t.clone()]).unwrap(), 0.0);

        // Both columns the same unit vector on both sides: 2 + 2 = 4.
        let dup = basis_tm(6, &[0, 0]);
        let loss = ortho_loss(&[dup.clone()], &[dup]).unwrap();
        assert!((loss - 4.0).abs() <= 1e-12, "loss {loss}");

        // Query columns at 60 degrees, target orthonormal: 2 * cos²(60°) = 0.5.
        let mut raw = Tensor::zeros(&[6, 2]);
        raw.set2(0, 0, 1.0);
        raw.set2(0, 1, 0.5);
        raw.set2(1, 1, 0.75f64.sqrt());
        let angled = TokenMatrix::from_raw(raw).unwrap();
        let loss = ortho_loss(&[angled], &[ortho_q]).unwrap();
        assert!((loss - 0.5).abs() <= 1e-12, "loss {loss}");
    }

    #[test]
    fn ortho_loss_is_nonnegative_on_random_input() {
        for seed in 0..20 {
            let q = vec![random_tm(8, 5, 70 + seed)];
            let t = vec![random_tm(8, 5, 90 + seed)];
            assert!(ortho_loss(&q, &t).unwrap() >= 0.0);
        }
    }

    #[test]
    fn total_loss_is_the_weighted_sum_and_lambda_zero_drops_ortho() {
        let queries: Vec<TokenMatrix> = (0..3).map(|i| random_tm(8, 4, 110 + i)).collect();
        let targets: Vec<TokenMatrix> = (0..3).map(|i| random_tm(8, 4, 120 + i)).collect();
        for lambda in [0.0, 0.1, 1.0] {
            let cfg = LossConfig { temperature: 10.0, lambda, batch_size: 3 };
            let total = total_loss(&queries, &targets, &cfg).unwrap();
            let ranking = ranking_loss(&queries, &targets, &cfg).unwrap();
            let ortho = ortho_loss(&queries, &targets).unwrap();
            assert!((total - (ranking + lambda * ortho)).abs() <= 1e-12);
        }
    }

    #[test]
    fn batch_mismatch_is_rejected() {
        let q = vec![random_tm(8, 4, 130)];
        let cfg = LossConfig::default();
        assert!(ranking_loss(&q, &[], &cfg).is_err());
        let t = vec![random_tm(8, 4, 131), random_tm(8, 4, 132)];
        assert!(ranking_loss(&q, &t, &cfg).is_err());
    }

    #[test]
    fn losses_are_deterministic() {
        let q = vec![random_tm(8, 4, 140), random_tm(8, 4, 141)];
        let t = vec![random_tm(8, 4, 142), random_tm(8, 4, 143)];
        let cfg = LossConfig::default();
        assert_eq!(total_loss(&q, &t, &cfg).unwrap(), total_loss(&q, &t, &cfg).unwrap());
    }
}
