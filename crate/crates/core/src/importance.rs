//! Variable-importance measures computed from fitted chains.

use serde::{Deserialize, Serialize};

use crate::data::PredictorType;
use crate::error::{BartError, Result};
use crate::sampler::Chain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImportanceKind {
    /// Average per-draw share of splitting rules using the predictor.
    Vip,
    /// Pooled-count approximation of VIP.
    VipApprox,
    /// VIP normalized within each predictor type.
    WithinTypeVip,
    /// Average per-draw share of mean split acceptance ratios.
    MetropolisImportance,
    /// Fraction of draws using the predictor at least once.
    Mpvip,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub kind: ImportanceKind,
    pub scores: Vec<f64>,
    pub types: Vec<PredictorType>,
    pub n_draws: usize,
    pub n_trees: usize,
}

fn ensure_nonempty(chain: &Chain) -> Result<()> {
    if chain.draws.is_empty() {
        Err(BartError::EmptyChain)
    } else {
        Ok(())
    }
}

fn report(chain: &Chain, kind: ImportanceKind, scores: Vec<f64>) -> ImportanceReport {
    ImportanceReport {
        kind,
        scores,
        types: chain.types.clone(),
        n_draws: chain.n_draws(),
        n_trees: chain.config.n_trees,
    }
}

/// Variable inclusion proportion: v_j = (1/K) sum_k c_jk / c_.k.
///
/// A draw without any split contributes 1/p to every predictor, which keeps
/// the scores normalized.
pub fn vip(chain: &Chain) -> Result<ImportanceReport> {
    ensure_nonempty(chain)?;
    let p = chain.n_predictors();
    let k = chain.n_draws() as f64;
    let mut scores = vec![0.0; p];
    for draw in &chain.draws {
        let total = draw.total_splits();
        if total == 0 {
            for s in scores.iter_mut() {
                *s += 1.0 / p as f64;
            }
        } else {
            for (s, &c) in scores.iter_mut().zip(&draw.split_counts) {
                *s += c as f64 / total as f64;
            }
        }
    }
    for s in scores.iter_mut() {
        *s /= k;
    }
    Ok(report(chain, ImportanceKind::Vip, scores))
}

/// Pooled approximation: v~_j = c_j. / c.. over all draws.
pub fn vip_approx(chain: &Chain) -> Result<ImportanceReport> {
    ensure_nonempty(chain)?;
    let p = chain.n_predictors();
    let mut totals = vec![0u64; p];
    for draw in &chain.draws {
        for (t, &c) in totals.iter_mut().zip(&draw.split_counts) {
            *t += c as u64;
        }
    }
    let grand: u64 = totals.iter().sum();
    if grand == 0 {
        return Err(BartError::InvalidData(
            "no splits anywhere in the chain".into(),
        ));
    }
    let scores = totals.iter().map(|&t| t as f64 / grand as f64).collect();
    Ok(report(chain, ImportanceKind::VipApprox, scores))
}

/// Per-predictor bound and observed gap from the approximation lemma.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LemmaBound {
    /// delta_1^(1/2) * delta_2.
    pub bound: f64,
    /// |v~_j - v_j|.
    pub gap: f64,
}

/// Check |v~_j - v_j| <= delta_1^(1/2) * delta_2 for every predictor, where
/// delta_1 is the second moment of the per-draw usage share and delta_2 the
/// coefficient of variation of the per-draw split totals.
pub fn lemma_bound_check(chain: &Chain) -> Result<Vec<LemmaBound>> {
    ensure_nonempty(chain)?;
    let p = chain.n_predictors();
    let k = chain.n_draws() as f64;
    let totals: Vec<f64> = chain
        .draws
        .iter()
        .map(|d| d.total_splits() as f64)
        .collect();
    if totals.iter().any(|&t| t == 0.0) {
        return Err(BartError::InvalidData(
            "a draw has no splits; the bound requires c_.k >= 1".into(),
        ));
    }
    let mean_total = totals.iter().sum::<f64>() / k;
    let var_total = totals
        .iter()
        .map(|&t| (t - mean_total) * (t - mean_total))
        .sum::<f64>()
        / k;
    let delta2 = var_total.sqrt() / mean_total;

    let v = vip(chain)?.scores;
    let v_tilde = vip_approx(chain)?.scores;
    let mut out = Vec::with_capacity(p);
    for j in 0..p {
        let delta1 = chain
            .draws
            .iter()
            .zip(&totals)
            .map(|(d, &t)| {
                let share = d.split_counts[j] as f64 / t;
                share * share
            })
            .sum::<f64>()
            / k;
        let bound = delta1.sqrt() * delta2;
        let gap = (v_tilde[j] - v[j]).abs();
        if gap > bound + 1e-12 {
            return Err(BartError::Numerical(format!(
                "approximation bound violated for predictor {j}: gap {gap} > bound {bound}"
            )));
        }
        out.push(LemmaBound { bound, gap });
    }
    Ok(out)
}

/// Within-type VIP: per draw, counts are normalized by the total usage of the
/// predictor's own type. Draws where a type has no splits contribute zero for
/// predictors of that type.
pub fn within_type_vip(chain: &Chain, types: &[PredictorType]) -> Result<ImportanceReport> {
    ensure_nonempty(chain)?;
    let p = chain.n_predictors();
    if types.len() != p {
        return Err(BartError::DimensionMismatch {
            expected: p,
            got: types.len(),
        });
    }
    let k = chain.n_draws() as f64;
    let mut scores = vec![0.0; p];
    for draw in &chain.draws {
        let mut type_totals = [0u64; 2];
        for (j, &c) in draw.split_counts.iter().enumerate() {
            type_totals[type_index(types[j])] += c as u64;
        }
        for (j, &c) in draw.split_counts.iter().enumerate() {
            let denom = type_totals[type_index(types[j])];
            if denom > 0 {
                scores[j] += c as f64 / denom as f64;
            }
        }
    }
    for s in scores.iter_mut() {
        *s /= k;
    }
    let mut rep = report(chain, ImportanceKind::WithinTypeVip, scores);
    rep.types = types.to_vec();
    Ok(rep)
}

fn type_index(t: PredictorType) -> usize {
    match t {
        PredictorType::Continuous => 0,
        PredictorType::Binary => 1,
    }
}

/// Metropolis importance: per draw, the mean acceptance ratio per split of
/// each predictor, normalized across predictors and averaged over draws.
/// Predictors unused in a draw contribute zero.
pub fn metropolis_importance(chain: &Chain) -> Result<ImportanceReport> {
    ensure_nonempty(chain)?;
    let p = chain.n_predictors();
    let k = chain.n_draws() as f64;
    let mut scores = vec![0.0; p];
    let mut u = vec![0.0; p];
    for (idx, draw) in chain.draws.iter().enumerate() {
        let mut total = 0.0;
        for j in 0..p {
            u[j] = if draw.split_counts[j] > 0 {
                draw.accept_sums[j] / draw.split_counts[j] as f64
            } else {
                0.0
            };
            total += u[j];
        }
        if total == 0.0 {
            return Err(BartError::InvalidData(format!(
                "draw {idx} carries no acceptance mass"
            )));
        }
        for j in 0..p {
            scores[j] += u[j] / total;
        }
    }
    for s in scores.iter_mut() {
        *s /= k;
    }
    Ok(report(chain, ImportanceKind::MetropolisImportance, scores))
}

/// Marginal posterior inclusion probability: the fraction of draws where the
/// predictor appears in at least one splitting rule.
pub fn mpvip(chain: &Chain) -> Result<ImportanceReport> {
    ensure_nonempty(chain)?;
    let p = chain.n_predictors();
    let k = chain.n_draws() as f64;
    let mut scores = vec![0.0; p];
    for draw in &chain.draws {
        for (s, &c) in scores.iter_mut().zip(&draw.split_counts) {
            if c >= 1 {
                *s += 1.0;
            }
        }
    }
    for s in scores.iter_mut() {
        *s /= k;
    }
    Ok(report(chain, ImportanceKind::Mpvip, scores))
}

/// The three nested variances of scores indexed by (dataset, predictor,
/// repetition), each with divisor count-1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NestedVariances {
    /// `per_dataset[i][j]`: variance across repetitions within dataset i.
    pub per_dataset: Vec<Vec<f64>>,
    /// `per_predictor[j]`: variance of the dataset means across datasets.
    pub per_predictor: Vec<f64>,
    /// Variance of the predictor means across predictors.
    pub across_predictors: f64,
}

/// `tensor[i][j][k]`: score of predictor j on dataset i, repetition k.
pub fn nested_variances(tensor: &[Vec<Vec<f64>>]) -> Result<NestedVariances> {
    let n_data = tensor.len();
    if n_data < 2 {
        return Err(BartError::InvalidData("need at least 2 datasets".into()));
    }
    let p = tensor[0].len();
    if p == 0 {
        return Err(BartError::InvalidData("no predictors".into()));
    }
    let n_rep = tensor[0][0].len();
    if n_rep < 2 {
        return Err(BartError::InvalidData("need at least 2 repetitions".into()));
    }
    for di in tensor {
        if di.len() != p || di.iter().any(|v| v.len() != n_rep) {
            return Err(BartError::InvalidData("ragged score tensor".into()));
        }
    }

    let mut per_dataset = vec![vec![0.0; p]; n_data];
    let mut dataset_means = vec![vec![0.0; p]; n_data];
    for i in 0..n_data {
        for j in 0..p {
            let xs = &tensor[i][j];
            let m = xs.iter().sum::<f64>() / n_rep as f64;
            dataset_means[i][j] = m;
            per_dataset[i][j] =
                xs.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / (n_rep - 1) as f64;
        }
    }
    let mut per_predictor = vec![0.0; p];
    let mut predictor_means = vec![0.0; p];
    for j in 0..p {
        let col: Vec<f64> = (0..n_data).map(|i| dataset_means[i][j]).collect();
        let m = col.iter().sum::<f64>() / n_data as f64;
        predictor_means[j] = m;
        per_predictor[j] = col.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / (n_data - 1) as f64;
    }
    let grand = predictor_means.iter().sum::<f64>() / p as f64;
    let across_predictors = predictor_means
        .iter()
        .map(|&x| (x - grand) * (x - grand))
        .sum::<f64>()
        / (p - 1) as f64;
    Ok(NestedVariances {
        per_dataset,
        per_predictor,
        across_predictors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{Chain, PosteriorDraw};

    fn draw(counts: Vec<u32>, sums: Vec<f64>) -> PosteriorDraw {
        PosteriorDraw {
            trees: Vec::new(),
            sigma: 1.0,
            split_counts: counts,
            accept_sums: sums,
            split_probs: None,
        }
    }

    fn chain_of(draws: Vec<PosteriorDraw>, types: Vec<PredictorType>) -> Chain {
        Chain::from_draws(draws, types)
    }

    fn cont(p: usize) -> Vec<PredictorType> {
        vec![PredictorType::Continuous; p]
    }

    #[test]
    fn vip_single_draw_single_split() {
        let c = chain_of(vec![draw(vec![1, 0, 0], vec![0.5, 0.0, 0.0])], cont(3));
        let r = vip(&c).unwrap();
        assert_eq!(r.scores, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn vip_two_draw_fixture() {
        // Draw 1: counts (2,1), total 3. Draw 2: counts (1,3), total 4.
        // v_1 = (2/3 + 1/4)/2 = 11/24.
        let c = chain_of(
            vec![
                draw(vec![2, 1], vec![1.0, 0.5]),
                draw(vec![1, 3], vec![0.5, 1.5]),
            ],
            cont(2),
        );
        let r = vip(&c).unwrap();
        assert!((r.scores[0] - 11.0 / 24.0).abs() < 1e-15);
        assert!((r.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let ra = vip_approx(&c).unwrap();
        assert!((ra.scores[0] - 3.0 / 7.0).abs() < 1e-15);
        assert!((ra.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vip_zero_split_draw_contributes_uniform() {
        let c = chain_of(vec![draw(vec![0, 0], vec![0.0, 0.0])], cont(2));
        let r = vip(&c).unwrap();
        assert_eq!(r.scores, vec![0.5, 0.5]);
        assert!(vip_approx(&c).is_err());
    }

    #[test]
    fn vip_approx_uniform_counts() {
        let c = chain_of(
            vec![
                draw(vec![3, 3, 3], vec![1.0; 3]),
                draw(vec![3, 3, 3], vec![1.0; 3]),
            ],
            cont(3),
        );
        let r = vip_approx(&c).unwrap();
        for s in r.scores {
            assert!((s - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn lemma_bound_two_draw_fixture() {
        let c = chain_of(
            vec![
                draw(vec![2, 1], vec![1.0, 0.5]),
                draw(vec![1, 3], vec![0.5, 1.5]),
            ],
            cont(2),
        );
        let bounds = lemma_bound_check(&c).unwrap();
        // gap_1 = |3/7 - 11/24| = 5/168.
        assert!((bounds[0].gap - 5.0 / 168.0).abs() < 1e-15);
        // delta_1 = ((2/3)^2 + (1/4)^2)/2, delta_2 = 0.5/3.5.
        let delta1: f64 = ((2.0f64 / 3.0).powi(2) + 0.25f64.powi(2)) / 2.0;
        let expected = delta1.sqrt() * (0.5 / 3.5);
        assert!((bounds[0].bound - expected).abs() < 1e-15);
        assert!(bounds[0].gap <= bounds[0].bound);
    }

    #[test]
    fn lemma_bound_degenerate_constant_totals() {
        // Constant c_.k across draws: delta_2 = 0 and v~ = v exactly.
        let c = chain_of(
            vec![
                draw(vec![2, 2], vec![1.0, 1.0]),
                draw(vec![3, 1], vec![1.0, 0.5]),
            ],
            cont(2),
        );
        let bounds = lemma_bound_check(&c).unwrap();
        for b in bounds {
            assert_eq!(b.bound, 0.0);
            assert!(b.gap < 1e-15);
        }
    }

    #[test]
    fn within_type_collapses_to_vip_for_single_type() {
        let c = chain_of(
            vec![
                draw(vec![2, 1, 4], vec![1.0, 0.5, 2.0]),
                draw(vec![0, 3, 1], vec![0.0, 1.5, 0.5]),
            ],
            cont(3),
        );
        let w = within_type_vip(&c, &cont(3)).unwrap();
        let v = vip(&c).unwrap();
        assert_eq!(w.scores, v.scores);
    }

    #[test]
    fn within_type_lone_binary_scores_one() {
        let types = vec![
            PredictorType::Binary,
            PredictorType::Continuous,
            PredictorType::Continuous,
        ];
        let c = chain_of(
            vec![
                draw(vec![1, 2, 2], vec![0.5, 1.0, 1.0]),
                draw(vec![2, 1, 0], vec![1.0, 0.5, 0.0]),
            ],
            types.clone(),
        );
        let w = within_type_vip(&c, &types).unwrap();
        assert!((w.scores[0] - 1.0).abs() < 1e-15);
        // Continuous scores sum to 1 within their type.
        assert!((w.scores[1] + w.scores[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metropolis_importance_fixtures() {
        // All splits accepted at ratio 1, counts (2,0): MI = (1,0).
        let c = chain_of(vec![draw(vec![2, 0], vec![2.0, 0.0])], cont(2));
        let r = metropolis_importance(&c).unwrap();
        assert_eq!(r.scores, vec![1.0, 0.0]);

        // u~ = (0.8, 0.2) normalizes to itself; two equal draws average
        // unchanged.
        let d = draw(vec![1, 1], vec![0.8, 0.2]);
        let c = chain_of(vec![d.clone(), d], cont(2));
        let r = metropolis_importance(&c).unwrap();
        assert!((r.scores[0] - 0.8).abs() < 1e-15);
        assert!((r.scores[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn metropolis_importance_rejects_zero_mass_draw() {
        let c = chain_of(vec![draw(vec![0, 0], vec![0.0, 0.0])], cont(2));
        assert!(metropolis_importance(&c).is_err());
    }

    #[test]
    fn mpvip_counts_usage_fraction() {
        let c = chain_of(
            vec![
                draw(vec![1, 0], vec![0.5, 0.0]),
                draw(vec![2, 0], vec![1.0, 0.0]),
                draw(vec![0, 0], vec![0.0, 0.0]),
                draw(vec![5, 0], vec![2.0, 0.0]),
            ],
            cont(2),
        );
        let r = mpvip(&c).unwrap();
        assert_eq!(r.scores, vec![0.75, 0.0]);
    }

    #[test]
    fn empty_chain_rejected_everywhere() {
        let c = chain_of(vec![], cont(2));
        assert!(vip(&c).is_err());
        assert!(vip_approx(&c).is_err());
        assert!(mpvip(&c).is_err());
        assert!(metropolis_importance(&c).is_err());
        assert!(lemma_bound_check(&c).is_err());
    }

    #[test]
    fn permutation_of_predictors_permutes_reports() {
        let types = vec![
            PredictorType::Binary,
            PredictorType::Continuous,
            PredictorType::Continuous,
        ];
        let draws = vec![
            draw(vec![2, 1, 4], vec![1.2, 0.5, 2.0]),
            draw(vec![1, 3, 1], vec![0.5, 1.5, 0.9]),
        ];
        let perm = [2usize, 0, 1]; // new position j holds old predictor perm[j]
        let permuted: Vec<PosteriorDraw> = draws
            .iter()
            .map(|d| {
                draw(
                    perm.iter().map(|&o| d.split_counts[o]).collect(),
                    perm.iter().map(|&o| d.accept_sums[o]).collect(),
                )
            })
            .collect();
        let ptypes: Vec<PredictorType> = perm.iter().map(|&o| types[o]).collect();
        let c1 = chain_of(draws, types.clone());
        let c2 = chain_of(permuted, ptypes.clone());
        for (a, b) in [
            (vip(&c1).unwrap(), vip(&c2).unwrap()),
            (vip_approx(&c1).unwrap(), vip_approx(&c2).unwrap()),
            (mpvip(&c1).unwrap(), mpvip(&c2).unwrap()),
            (
                metropolis_importance(&c1).unwrap(),
                metropolis_importance(&c2).unwrap(),
            ),
            (
                within_type_vip(&c1, &types).unwrap(),
                within_type_vip(&c2, &ptypes).unwrap(),
            ),
        ] {
            for (j, &o) in perm.iter().enumerate() {
                assert!((b.scores[j] - a.scores[o]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn nested_variances_zero_for_identical_scores() {
        let tensor = vec![vec![vec![0.3; 4]; 3]; 5];
        let nv = nested_variances(&tensor).unwrap();
        assert!(nv.per_dataset.iter().flatten().all(|&v| v == 0.0));
        assert!(nv.per_predictor.iter().all(|&v| v == 0.0));
        assert_eq!(nv.across_predictors, 0.0);
    }

    #[test]
    fn nested_variances_match_two_pass_oracle() {
        // 2 datasets x 2 predictors x 2 repetitions, hand values.
        let tensor = vec![
            vec![vec![0.1, 0.3], vec![0.5, 0.7]],
            vec![vec![0.2, 0.6], vec![0.4, 0.4]],
        ];
        fn var(xs: &[f64]) -> f64 {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
        }
        let nv = nested_variances(&tensor).unwrap();
        assert!((nv.per_dataset[0][0] - var(&[0.1, 0.3])).abs() < 1e-15);
        assert!((nv.per_dataset[1][1] - var(&[0.4, 0.4])).abs() < 1e-15);
        // Dataset means per predictor: j=0 -> (0.2, 0.4); j=1 -> (0.6, 0.4).
        assert!((nv.per_predictor[0] - var(&[0.2, 0.4])).abs() < 1e-15);
        assert!((nv.per_predictor[1] - var(&[0.6, 0.4])).abs() < 1e-15);
        // Predictor means: (0.3, 0.5).
        assert!((nv.across_predictors - var(&[0.3, 0.5])).abs() < 1e-15);
    }

    #[test]
    fn nested_variances_guards_dimensions() {
        assert!(nested_variances(&[vec![vec![0.1, 0.2]]]).is_err());
        assert!(nested_variances(&vec![vec![vec![0.1]; 2]; 2]).is_err());
    }
}
