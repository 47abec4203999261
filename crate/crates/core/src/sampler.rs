//! Posterior samplers: continuous BART, probit BART via latent-variable
//! augmentation, and the DART variant with a Dirichlet prior on split-variable
//! probabilities.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::{Dataset, PredictorType, ResponseKind};
use crate::error::{BartError, Result};
use crate::math::{self, chi_squared_quantile, phi, phi_inv, truncated_std_normal};
use crate::rng::{rng_for, BartRng};
use crate::tree::{
    log_depth_ratio, log_likelihood_ratio, log_nodes_ratio, metropolis_acceptance, CutpointGrid,
    SuffStat, Tree, TreeFit, TreePrior,
};

/// Settings for the Dirichlet split-probability prior.
///
/// The concentration a follows a/(a + rho) ~ Beta(prior_a, prior_b) and is
/// refreshed by a 1000-point grid Gibbs step each iteration, unless pinned
/// with `fixed_concentration`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DartSettings {
    pub prior_a: f64,
    pub prior_b: f64,
    /// Scale of the concentration prior; defaults to the number of predictors.
    pub rho: Option<f64>,
    /// Pin the concentration instead of sampling it.
    pub fixed_concentration: Option<f64>,
}

impl Default for DartSettings {
    fn default() -> Self {
        DartSettings {
            prior_a: 0.5,
            prior_b: 1.0,
            rho: None,
            fixed_concentration: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of trees M.
    pub n_trees: usize,
    pub n_burn: usize,
    pub n_keep: usize,
    /// Keep every `thin`-th post-burn-in draw.
    pub thin: usize,
    /// Depth-penalty parameters of the tree prior.
    pub gamma: f64,
    pub beta: f64,
    /// Leaf-prior shrinkage: mu ~ N(0, (0.5/(k sqrt(M)))^2) on the rescaled
    /// response (3 in place of 0.5 on the probit latent scale).
    pub k: f64,
    /// Error-variance prior sigma^2 ~ nu*lambda/chi^2_nu with lambda set so the
    /// prior puts mass q below the sample standard deviation.
    pub nu: f64,
    pub q: f64,
    /// Cutpoints per continuous predictor, uniformly spaced over the observed
    /// range.
    pub n_cutpoints: usize,
    pub dart: Option<DartSettings>,
    pub seed: u64,
    /// Verify tree invariants, routing partitions and residual bookkeeping
    /// while sampling. Costs a full pass per iteration; for tests.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub check_invariants: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_trees: 200,
            n_burn: 1000,
            n_keep: 1000,
            thin: 1,
            gamma: 0.95,
            beta: 2.0,
            k: 2.0,
            nu: 3.0,
            q: 0.90,
            n_cutpoints: 100,
            dart: None,
            seed: 0,
            check_invariants: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(BartError::InvalidConfig("n_trees must be >= 1".into()));
        }
        if self.n_keep == 0 {
            return Err(BartError::InvalidConfig("n_keep must be >= 1".into()));
        }
        if self.thin == 0 {
            return Err(BartError::InvalidConfig("thin must be >= 1".into()));
        }
        if self.n_cutpoints == 0 {
            return Err(BartError::InvalidConfig("n_cutpoints must be >= 1".into()));
        }
        TreePrior {
            gamma: self.gamma,
            beta: self.beta,
        }
        .validate()?;
        if !(self.k > 0.0) {
            return Err(BartError::InvalidConfig("k must be positive".into()));
        }
        if !(self.nu > 0.0) {
            return Err(BartError::InvalidConfig("nu must be positive".into()));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(BartError::InvalidConfig("q must lie in (0,1)".into()));
        }
        Ok(())
    }

    fn tree_prior(&self) -> TreePrior {
        TreePrior {
            gamma: self.gamma,
            beta: self.beta,
        }
    }
}

/// One post-burn-in state of the sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraw {
    pub trees: Vec<Tree>,
    /// Error s.d. on the original response scale (1.0 for probit draws).
    pub sigma: f64,
    /// Per-predictor split counts c_jk.
    pub split_counts: Vec<u32>,
    /// Per-predictor sums of cached acceptance ratios over this draw's splits.
    pub accept_sums: Vec<f64>,
    /// Split-variable probabilities (DART only).
    pub split_probs: Option<Vec<f64>>,
}

impl PosteriorDraw {
    pub fn total_splits(&self) -> u32 {
        self.split_counts.iter().sum()
    }
}

/// A fitted chain: kept draws plus everything needed to predict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Chain {
    pub draws: Vec<PosteriorDraw>,
    pub config: SamplerConfig,
    pub response: ResponseKind,
    pub types: Vec<PredictorType>,
    pub data_fingerprint: u64,
    /// Original-scale prediction = pred_scale * (sum of tree outputs) + pred_shift.
    pub pred_scale: f64,
    pub pred_shift: f64,
}

impl Chain {
    pub fn n_predictors(&self) -> usize {
        self.types.len()
    }

    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    /// Assemble a chain from externally built draws (fixtures, tests).
    pub fn from_draws(draws: Vec<PosteriorDraw>, types: Vec<PredictorType>) -> Chain {
        Chain {
            draws,
            config: SamplerConfig::default(),
            response: ResponseKind::Continuous,
            types,
            data_fingerprint: 0,
            pred_scale: 1.0,
            pred_shift: 0.0,
        }
    }

    /// Content digest for reproducibility checks.
    pub fn digest(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for d in &self.draws {
            d.sigma.to_bits().hash(&mut h);
            d.split_counts.hash(&mut h);
            for v in &d.accept_sums {
                v.to_bits().hash(&mut h);
            }
            if let Some(s) = &d.split_probs {
                for v in s {
                    v.to_bits().hash(&mut h);
                }
            }
            for t in &d.trees {
                for id in t.live_ids() {
                    let node = t.node(id);
                    node.depth.hash(&mut h);
                    match node.kind {
                        crate::tree::NodeKind::Terminal { value } => {
                            0u8.hash(&mut h);
                            value.to_bits().hash(&mut h);
                        }
                        crate::tree::NodeKind::Internal {
                            var,
                            cut,
                            birth_ratio,
                            ..
                        } => {
                            1u8.hash(&mut h);
                            var.hash(&mut h);
                            cut.to_bits().hash(&mut h);
                            birth_ratio.unwrap_or(-1.0).to_bits().hash(&mut h);
                        }
                    }
                }
            }
        }
        h.finish()
    }
}

/// Per-draw and posterior-mean predictions; probabilities filled for probit
/// chains.
#[derive(Debug, Clone)]
pub struct Predictions {
    /// `per_draw[k][i]`: draw k's prediction for row i, original scale.
    pub per_draw: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub prob_per_draw: Option<Vec<Vec<f64>>>,
    /// Phi applied to the mean latent prediction.
    pub prob_mean: Option<Vec<f64>>,
}

/// Evaluate a chain on a set of observation rows.
pub fn predict(chain: &Chain, rows: &[Vec<f64>]) -> Result<Predictions> {
    let p = chain.n_predictors();
    for row in rows {
        if row.len() != p {
            return Err(BartError::DimensionMismatch {
                expected: p,
                got: row.len(),
            });
        }
    }
    let mut per_draw = Vec::with_capacity(chain.draws.len());
    for draw in &chain.draws {
        let mut preds = Vec::with_capacity(rows.len());
        for row in rows {
            let mut f = 0.0;
            for tree in &draw.trees {
                f += tree.evaluate(row)?;
            }
            preds.push(chain.pred_scale * f + chain.pred_shift);
        }
        per_draw.push(preds);
    }
    let k = per_draw.len() as f64;
    let mean: Vec<f64> = (0..rows.len())
        .map(|i| per_draw.iter().map(|d| d[i]).sum::<f64>() / k)
        .collect();
    let (prob_per_draw, prob_mean) = if chain.response == ResponseKind::Binary {
        (
            Some(
                per_draw
                    .iter()
                    .map(|d| d.iter().map(|&f| phi(f)).collect())
                    .collect(),
            ),
            Some(mean.iter().map(|&f| phi(f)).collect()),
        )
    } else {
        (None, None)
    };
    Ok(Predictions {
        per_draw,
        mean,
        prob_per_draw,
        prob_mean,
    })
}

/// Fit continuous BART. The response is rescaled to [-0.5, 0.5] internally;
/// reported sigmas and predictions are on the original scale.
pub fn fit_continuous(data: &Dataset, cfg: &SamplerConfig) -> Result<Chain> {
    cfg.validate()?;
    if data.n() < 2 {
        return Err(BartError::InvalidData("need at least 2 observations".into()));
    }
    let y_min = data.y.iter().copied().fold(f64::INFINITY, f64::min);
    let y_max = data.y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = y_max - y_min;
    let (scale, shift) = if range > 0.0 {
        (range, 0.5 * (y_min + y_max))
    } else {
        (1.0, y_min)
    };
    let target: Vec<f64> = data.y.iter().map(|&v| (v - shift) / scale).collect();
    let sd = math::sample_sd(&target).max(1e-6);
    let lambda = sd * sd * chi_squared_quantile(1.0 - cfg.q, cfg.nu)? / cfg.nu;
    let tau = 0.5 / (cfg.k * (cfg.n_trees as f64).sqrt());
    let mut engine = Engine::new(data, cfg, target, tau * tau)?;
    let mut sigma2 = sd * sd;

    let total = cfg.n_burn + cfg.n_keep * cfg.thin;
    let mut draws = Vec::with_capacity(cfg.n_keep);
    for it in 0..total {
        engine.sweep(sigma2);
        let ssr: f64 = engine.resid.iter().map(|r| r * r).sum();
        sigma2 = draw_sigma2(&mut engine.rng, cfg.nu, lambda, data.n(), ssr);
        engine.update_dart();
        engine.verify(sigma2);
        if it >= cfg.n_burn && (it - cfg.n_burn) % cfg.thin == 0 {
            draws.push(engine.snapshot(scale * sigma2.sqrt()));
        }
    }
    Ok(Chain {
        draws,
        config: cfg.clone(),
        response: ResponseKind::Continuous,
        types: data.types.clone(),
        data_fingerprint: data.fingerprint(),
        pred_scale: scale,
        pred_shift: shift,
    })
}

/// Fit probit BART for a 0/1 response via truncated-normal latent draws; the
/// tree machinery runs on the latents with unit error variance.
pub fn fit_probit(data: &Dataset, cfg: &SamplerConfig) -> Result<Chain> {
    cfg.validate()?;
    if data.response_kind() != ResponseKind::Binary {
        return Err(BartError::InvalidData("response is not binary 0/1".into()));
    }
    let n = data.n();
    if n < 2 {
        return Err(BartError::InvalidData("need at least 2 observations".into()));
    }
    // Centering constant for the latent scale, from the observed rate.
    let rate = (data.y.iter().sum::<f64>() / n as f64)
        .clamp(1.0 / (n as f64 + 2.0), 1.0 - 1.0 / (n as f64 + 2.0));
    let offset = phi_inv(rate);
    let tau = 3.0 / (cfg.k * (cfg.n_trees as f64).sqrt());
    let mut engine = Engine::new(data, cfg, vec![0.0; n], tau * tau)?;

    let total = cfg.n_burn + cfg.n_keep * cfg.thin;
    let mut draws = Vec::with_capacity(cfg.n_keep);
    for it in 0..total {
        // Latents given the current fit and the observed classes.
        for i in 0..n {
            let f = engine.target[i] - engine.resid[i];
            let above = data.y[i] == 1.0;
            let z = truncated_std_normal(&mut engine.rng, f + offset, 0.0, above);
            assert!(
                if above { z > 0.0 } else { z < 0.0 },
                "latent sign violated at obs {i}"
            );
            let t_new = z - offset;
            engine.resid[i] += t_new - engine.target[i];
            engine.target[i] = t_new;
        }
        engine.sweep(1.0);
        engine.update_dart();
        engine.verify(1.0);
        if it >= cfg.n_burn && (it - cfg.n_burn) % cfg.thin == 0 {
            draws.push(engine.snapshot(1.0));
        }
    }
    Ok(Chain {
        draws,
        config: cfg.clone(),
        response: ResponseKind::Binary,
        types: data.types.clone(),
        data_fingerprint: data.fingerprint(),
        pred_scale: 1.0,
        pred_shift: offset,
    })
}

/// Fit the DART variant: requires `cfg.dart` and dispatches on the response
/// kind.
pub fn fit_dart(data: &Dataset, cfg: &SamplerConfig) -> Result<Chain> {
    if cfg.dart.is_none() {
        return Err(BartError::InvalidConfig(
            "fit_dart requires dart settings".into(),
        ));
    }
    match data.response_kind() {
        ResponseKind::Binary => fit_probit(data, cfg),
        ResponseKind::Continuous => fit_continuous(data, cfg),
    }
}

/// Fit by response kind, honoring `cfg.dart` if set.
pub fn fit_auto(data: &Dataset, cfg: &SamplerConfig) -> Result<Chain> {
    match data.response_kind() {
        ResponseKind::Binary => fit_probit(data, cfg),
        ResponseKind::Continuous => fit_continuous(data, cfg),
    }
}

/// Draw sigma^2 from its conjugate conditional (nu*lambda + SSR)/chi^2_{nu+n}.
pub fn draw_sigma2<R: Rng + ?Sized>(rng: &mut R, nu: f64, lambda: f64, n: usize, ssr: f64) -> f64 {
    let df = nu + n as f64;
    let chi2 = Gamma::new(df / 2.0, 2.0).expect("valid gamma").sample(rng);
    (nu * lambda + ssr) / chi2
}

struct DartState {
    s: Vec<f64>,
    concentration: f64,
    rho: f64,
    prior_a: f64,
    prior_b: f64,
    update_concentration: bool,
}

struct Engine<'d> {
    columns: &'d [Vec<f64>],
    grid: CutpointGrid,
    prior: TreePrior,
    tau2: f64,
    trees: Vec<TreeFit>,
    fits: Vec<Vec<f64>>,
    target: Vec<f64>,
    resid: Vec<f64>,
    rng: BartRng,
    dart: Option<DartState>,
    check: bool,
}

impl<'d> Engine<'d> {
    fn new(data: &'d Dataset, cfg: &SamplerConfig, target: Vec<f64>, tau2: f64) -> Result<Self> {
        let n = data.n();
        let p = data.p();
        let grid = CutpointGrid::from_data(&data.columns, &data.types, cfg.n_cutpoints);
        let trees = (0..cfg.n_trees).map(|_| TreeFit::new(n, p, 0.0)).collect();
        let dart = cfg.dart.as_ref().map(|d| {
            let rho = d.rho.unwrap_or(p as f64);
            DartState {
                s: vec![1.0 / p as f64; p],
                concentration: d.fixed_concentration.unwrap_or(rho),
                rho,
                prior_a: d.prior_a,
                prior_b: d.prior_b,
                update_concentration: d.fixed_concentration.is_none(),
            }
        });
        Ok(Engine {
            columns: &data.columns,
            grid,
            prior: cfg.tree_prior(),
            tau2,
            trees,
            fits: vec![vec![0.0; n]; cfg.n_trees],
            resid: target.clone(),
            target,
            rng: rng_for(cfg.seed, 0),
            dart,
            check: cfg.check_invariants,
        })
    }

    /// One backfitting sweep: a Metropolis tree move plus fresh leaf values
    /// for each of the M trees in turn.
    fn sweep(&mut self, sigma2: f64) {
        let weights = self.dart.as_ref().map(|d| d.s.clone());
        for m in 0..self.trees.len() {
            self.update_structure(m, sigma2, weights.as_deref());
            self.draw_leaves(m, sigma2);
        }
    }

    fn update_structure(&mut self, m: usize, sigma2: f64, weights: Option<&[f64]>) {
        let try_birth_first = self.rng.random::<f64>() < 0.5;
        if try_birth_first {
            if !self.try_birth(m, sigma2, false, weights) {
                self.try_death(m, sigma2, true);
            }
        } else if !self.try_death(m, sigma2, false) {
            self.try_birth(m, sigma2, true, weights);
        }
    }

    /// Attempt a BIRTH move. Returns false when no proposal exists so the
    /// caller can fall back to the other move. `forced` marks that DEATH was
    /// unavailable, which shifts the executed-move probability to 1.
    fn try_birth(&mut self, m: usize, sigma2: f64, forced: bool, weights: Option<&[f64]>) -> bool {
        let prop = {
            let tree = &mut self.trees[m];
            match tree.propose_birth(self.columns, &self.grid, &mut self.rng, weights) {
                Some(p) => p,
                None => return false,
            }
        };
        let tree = &self.trees[m];
        let b = tree.tree.n_terminal();
        let depth = tree.tree.node(prop.node).depth;
        let leaf_fit = tree.tree.leaf_value(prop.node);
        let (parent, left, right) = tree.birth_stats(self.columns, &prop, &self.resid, leaf_fit);
        let log_lik = match log_likelihood_ratio(parent, left, right, sigma2, self.tau2) {
            Ok(v) => v,
            Err(_) => return true, // no valid move; treated as a rejected step
        };
        let log_r3 = log_nodes_ratio(b) + log_depth_ratio(depth, &self.prior) + log_lik;

        // Executed-move probabilities: 0.5 when the opposite move was
        // available, 1 when this move was forced. The reverse DEATH from the
        // proposed tree is forced only if that tree has no growable terminal.
        let p_fwd: f64 = if forced || b == 1 { 1.0 } else { 0.5 };
        let p_rev: f64 = if self.birth_reverse_can_grow(m, &prop) {
            0.5
        } else {
            1.0
        };
        let log_r = log_r3 + p_rev.ln() - p_fwd.ln();
        if self.rng.random::<f64>().ln() < log_r {
            let stored = if log_r3 >= 0.0 {
                1.0
            } else {
                log_r3.exp().max(f64::MIN_POSITIVE)
            };
            debug_assert_eq!(
                stored,
                metropolis_acceptance(log_r3.exp().min(f64::MAX).max(f64::MIN_POSITIVE)).unwrap()
            );
            self.trees[m].apply_birth(self.columns, &prop, stored);
        }
        true
    }

    /// Whether the tree resulting from `prop` would still admit a BIRTH.
    fn birth_reverse_can_grow(&mut self, m: usize, prop: &crate::tree::BirthProposal) -> bool {
        let terminals = self.trees[m].tree.terminal_ids();
        for id in terminals {
            if id == prop.node {
                continue;
            }
            if self.node_growable(m, id) {
                return true;
            }
        }
        // Only the new children are left to check: scan the split's partition
        // with an early exit on the first valid cutpoint either side.
        let tree = &self.trees[m];
        let p = self.columns.len();
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); 2 * p];
        let split_col = &self.columns[prop.var];
        for &i in tree.obs(prop.node) {
            let i = i as usize;
            let side = if split_col[i] < prop.cut { 0 } else { p };
            for (j, col) in self.columns.iter().enumerate() {
                let v = col[i];
                let r = &mut ranges[side + j];
                let mut widened = false;
                if v < r.0 {
                    r.0 = v;
                    widened = true;
                }
                if v > r.1 {
                    r.1 = v;
                    widened = true;
                }
                if widened && r.0 < r.1 && self.grid.n_valid(j, r.0, r.1) > 0 {
                    return true;
                }
            }
        }
        false
    }

    fn node_growable(&mut self, m: usize, id: usize) -> bool {
        self.trees[m].node_growable(id, self.columns, &self.grid)
    }

    /// Whether any terminal node of tree m admits a valid split.
    fn tree_can_grow(&mut self, m: usize) -> bool {
        let terminals = self.trees[m].tree.terminal_ids();
        terminals.into_iter().any(|id| self.node_growable(m, id))
    }

    fn try_death(&mut self, m: usize, sigma2: f64, forced: bool) -> bool {
        let prop = match self.trees[m].propose_death(&mut self.rng) {
            Some(p) => p,
            None => return false,
        };
        let tree = &self.trees[m];
        let b = tree.tree.n_terminal();
        let depth = tree.tree.node(prop.node).depth;
        let (left_id, right_id) = match tree.tree.node(prop.node).kind {
            crate::tree::NodeKind::Internal { left, right, .. } => (left, right),
            _ => unreachable!(),
        };
        let mut left = SuffStat::default();
        for &i in tree.obs(left_id) {
            left.add(self.resid[i as usize] + self.fits[m][i as usize]);
        }
        let mut right = SuffStat::default();
        for &i in tree.obs(right_id) {
            right.add(self.resid[i as usize] + self.fits[m][i as usize]);
        }
        let parent = SuffStat {
            n: left.n + right.n,
            sum: left.sum + right.sum,
        };
        let log_lik_rev = match log_likelihood_ratio(parent, left, right, sigma2, self.tau2) {
            Ok(v) => v,
            Err(_) => return true,
        };
        // Reverse move: a BIRTH on the pruned tree recreating this split.
        let log_r3_rev = log_nodes_ratio(b - 1) + log_depth_ratio(depth, &self.prior) + log_lik_rev;
        let p_fwd: f64 = if forced || !self.tree_can_grow(m) { 1.0 } else { 0.5 };
        // From the pruned tree, BIRTH is forced only when it is root-only.
        let p_rev: f64 = if b - 1 == 1 { 1.0 } else { 0.5 };
        let log_r = -log_r3_rev + p_rev.ln() - p_fwd.ln();
        if self.rng.random::<f64>().ln() < log_r {
            self.trees[m].apply_death(&prop);
        }
        true
    }

    fn draw_leaves(&mut self, m: usize, sigma2: f64) {
        let tree = &mut self.trees[m];
        let fits = &mut self.fits[m];
        for id in tree.tree.terminal_ids() {
            let mut stat = SuffStat::default();
            for &i in tree.obs(id) {
                stat.add(self.resid[i as usize] + fits[i as usize]);
            }
            let v = 1.0 / (stat.n as f64 / sigma2 + 1.0 / self.tau2);
            let mean = v * stat.sum / sigma2;
            let z: f64 = StandardNormal.sample(&mut self.rng);
            let value = mean + v.sqrt() * z;
            match &mut tree.tree.node_mut(id).kind {
                crate::tree::NodeKind::Terminal { value: v } => *v = value,
                _ => unreachable!(),
            }
            for &i in tree.obs(id) {
                let i = i as usize;
                self.resid[i] += fits[i] - value;
                fits[i] = value;
            }
        }
    }

    fn update_dart(&mut self) {
        let Some(dart) = &mut self.dart else {
            return;
        };
        let p = dart.s.len();
        let mut counts = vec![0u32; p];
        for t in &self.trees {
            t.tree.split_counts(&mut counts);
        }
        // s | counts ~ Dirichlet(a/p + c_j).
        let base = dart.concentration / p as f64;
        let mut total = 0.0;
        for j in 0..p {
            let shape = base + counts[j] as f64;
            let g = Gamma::new(shape, 1.0).expect("valid gamma").sample(&mut self.rng);
            dart.s[j] = g.max(1e-300);
            total += dart.s[j];
        }
        for v in dart.s.iter_mut() {
            *v /= total;
        }
        if dart.update_concentration {
            // Grid Gibbs step for a via u = a/(a+rho) on (0,1).
            let sum_log_s: f64 = dart.s.iter().map(|&v| v.ln()).sum();
            const GRID: usize = 1000;
            let mut logw = Vec::with_capacity(GRID);
            let mut alphas = Vec::with_capacity(GRID);
            for g in 0..GRID {
                let u = (g as f64 + 1.0) / (GRID as f64 + 1.0);
                let a = dart.rho * u / (1.0 - u);
                let lp = (dart.prior_a - 1.0) * u.ln() + (dart.prior_b - 1.0) * (1.0 - u).ln();
                let ll = ln_gamma(a) - p as f64 * ln_gamma(a / p as f64) + (a / p as f64) * sum_log_s;
                logw.push(lp + ll);
                alphas.push(a);
            }
            let lse = math::log_sum_exp(&logw);
            let mut u = self.rng.random::<f64>();
            let mut chosen = alphas[GRID - 1];
            for g in 0..GRID {
                u -= (logw[g] - lse).exp();
                if u <= 0.0 {
                    chosen = alphas[g];
                    break;
                }
            }
            dart.concentration = chosen;
        }
    }

    fn snapshot(&self, sigma_original: f64) -> PosteriorDraw {
        let p = self.columns.len();
        let trees: Vec<Tree> = self.trees.iter().map(|t| t.tree.compacted()).collect();
        let mut split_counts = vec![0u32; p];
        let mut accept_sums = vec![0.0; p];
        for t in &trees {
            t.split_counts(&mut split_counts);
            t.accept_sums(&mut accept_sums);
        }
        PosteriorDraw {
            trees,
            sigma: sigma_original,
            split_counts,
            accept_sums,
            split_probs: self.dart.as_ref().map(|d| d.s.clone()),
        }
    }

    /// Paranoid consistency pass, active only with `check_invariants`.
    fn verify(&self, _sigma2: f64) {
        if !self.check {
            return;
        }
        let n = self.target.len();
        for (m, t) in self.trees.iter().enumerate() {
            t.tree
                .check_invariants(None)
                .unwrap_or_else(|e| panic!("tree {m} invariant: {e}"));
            t.check_routing(self.columns, n)
                .unwrap_or_else(|e| panic!("tree {m} routing: {e}"));
        }
        for i in 0..n {
            let total: f64 = self.fits.iter().map(|f| f[i]).sum();
            let err = (self.target[i] - total - self.resid[i]).abs();
            assert!(err <= 1e-8, "residual bookkeeping off by {err} at obs {i}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn toy_data(n: usize, p: usize, seed: u64, f: impl Fn(&[f64]) -> f64, noise: f64) -> Dataset {
        let mut rng = rng_for(seed, 99);
        let columns: Vec<Vec<f64>> = (0..p)
            .map(|_| (0..n).map(|_| rng.random::<f64>()).collect())
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let row: Vec<f64> = columns.iter().map(|c| c[i]).collect();
                let z: f64 = StandardNormal.sample(&mut rng);
                f(&row) + noise * z
            })
            .collect();
        Dataset::new(columns, y, vec![PredictorType::Continuous; p]).unwrap()
    }

    fn small_cfg(seed: u64) -> SamplerConfig {
        SamplerConfig {
            n_trees: 10,
            n_burn: 100,
            n_keep: 100,
            seed,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn zero_response_predicts_near_zero() {
        let mut data = toy_data(60, 3, 1, |_| 0.0, 0.0);
        data.y.iter_mut().for_each(|v| *v = 0.0);
        let chain = fit_continuous(&data, &small_cfg(1)).unwrap();
        let preds = predict(&chain, &data.rows()).unwrap();
        for &m in &preds.mean {
            assert!(m.abs() < 0.05, "prediction {m}");
        }
    }

    #[test]
    fn same_seed_bit_identical() {
        let data = toy_data(50, 3, 2, |x| 3.0 * x[0], 0.5);
        let a = fit_continuous(&data, &small_cfg(7)).unwrap();
        let b = fit_continuous(&data, &small_cfg(7)).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = fit_continuous(&data, &small_cfg(8)).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn split_counts_match_internal_nodes() {
        let data = toy_data(80, 4, 3, |x| 5.0 * x[1], 0.3);
        let chain = fit_continuous(&data, &small_cfg(3)).unwrap();
        for draw in &chain.draws {
            let total: u32 = draw.split_counts.iter().sum();
            let internal: usize = draw.trees.iter().map(|t| t.n_internal()).sum();
            assert_eq!(total as usize, internal);
            for (j, &u) in draw.accept_sums.iter().enumerate() {
                assert!(u <= draw.split_counts[j] as f64 + 1e-12);
                assert!(u >= 0.0);
            }
        }
    }

    #[test]
    fn invariant_checked_fit_runs_clean() {
        let data = toy_data(40, 3, 4, |x| 2.0 * x[2], 0.4);
        let cfg = SamplerConfig {
            check_invariants: true,
            ..small_cfg(4)
        };
        fit_continuous(&data, &cfg).unwrap();
    }

    #[test]
    fn recovers_signal_roughly() {
        let data = toy_data(150, 2, 5, |x| if x[0] < 0.5 { -2.0 } else { 2.0 }, 0.3);
        let cfg = SamplerConfig {
            n_trees: 20,
            n_burn: 300,
            n_keep: 300,
            seed: 5,
            ..SamplerConfig::default()
        };
        let chain = fit_continuous(&data, &cfg).unwrap();
        let preds = predict(&chain, &data.rows()).unwrap();
        let rmse: f64 = (data
            .y
            .iter()
            .zip(&preds.mean)
            .map(|(y, m)| (y - m) * (y - m))
            .sum::<f64>()
            / data.n() as f64)
            .sqrt();
        assert!(rmse < 0.8, "rmse {rmse}");
        // sigma should land near the generating value 0.3.
        let mean_sigma: f64 =
            chain.draws.iter().map(|d| d.sigma).sum::<f64>() / chain.n_draws() as f64;
        assert!(mean_sigma > 0.15 && mean_sigma < 0.6, "sigma {mean_sigma}");
    }

    #[test]
    fn probit_all_ones_pushes_probability_up() {
        let n = 80;
        let mut rng = rng_for(6, 0);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let data = Dataset::new(
            vec![x],
            vec![1.0; n],
            vec![PredictorType::Continuous],
        )
        .unwrap();
        let chain = fit_probit(&data, &small_cfg(6)).unwrap();
        let preds = predict(&chain, &data.rows()).unwrap();
        let mean_p =
            preds.prob_mean.unwrap().iter().sum::<f64>() / n as f64;
        assert!(mean_p > 0.8, "mean probability {mean_p}");
    }

    #[test]
    fn probit_rejects_non_binary() {
        let data = toy_data(30, 2, 7, |x| x[0], 0.1);
        assert!(fit_probit(&data, &small_cfg(7)).is_err());
    }

    #[test]
    fn probit_probabilities_strictly_inside_unit_interval() {
        let n = 100;
        let mut rng = rng_for(8, 0);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = x.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
        let data = Dataset::new(vec![x], y, vec![PredictorType::Continuous]).unwrap();
        let chain = fit_probit(&data, &small_cfg(8)).unwrap();
        let preds = predict(&chain, &data.rows()).unwrap();
        for p in preds.prob_mean.unwrap() {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn sigma2_conditional_matches_inverse_chi_square() {
        // Goodness of fit for the sigma^2 draw at fixed residuals: 20
        // equiprobable bins, chi-square test at the 0.001 level.
        let mut rng = rng_for(9, 0);
        let (nu, lambda, n) = (3.0, 0.01, 40usize);
        let ssr = 0.35;
        let draws: Vec<f64> = (0..10_000)
            .map(|_| draw_sigma2(&mut rng, nu, lambda, n, ssr))
            .collect();
        let df = nu + n as f64;
        let scale = nu * lambda + ssr;
        let chi = ChiSquared::new(df).unwrap();
        // P(sigma^2 <= t) = P(chi2 >= scale/t).
        let cdf = |t: f64| 1.0 - chi.cdf(scale / t);
        let bins = 20usize;
        let mut counts = vec![0usize; bins];
        for &d in &draws {
            let u = cdf(d);
            let b = ((u * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let expect = draws.len() as f64 / bins as f64;
        let stat: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expect;
                d * d / expect
            })
            .sum();
        let crit = ChiSquared::new((bins - 1) as f64).unwrap().inverse_cdf(0.999);
        assert!(stat < crit, "GOF stat {stat} >= {crit}");
    }

    #[test]
    fn dart_uniform_limit_keeps_probabilities_flat() {
        let data = toy_data(60, 2, 10, |x| 4.0 * x[0], 0.3);
        let cfg = SamplerConfig {
            dart: Some(DartSettings {
                fixed_concentration: Some(1e6),
                ..DartSettings::default()
            }),
            ..small_cfg(10)
        };
        let chain = fit_dart(&data, &cfg).unwrap();
        for draw in &chain.draws {
            let s = draw.split_probs.as_ref().unwrap();
            let total: f64 = s.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
            for &v in s {
                assert!(v > 0.3 && v < 0.7, "s entry {v}");
            }
        }
    }

    #[test]
    fn dart_concentrates_on_signal_predictor() {
        let data = toy_data(120, 2, 11, |x| 8.0 * x[0], 0.3);
        let cfg = SamplerConfig {
            n_trees: 20,
            n_burn: 400,
            n_keep: 400,
            dart: Some(DartSettings::default()),
            seed: 11,
            ..SamplerConfig::default()
        };
        let chain = fit_dart(&data, &cfg).unwrap();
        let mean_s0: f64 = chain
            .draws
            .iter()
            .map(|d| d.split_probs.as_ref().unwrap()[0])
            .sum::<f64>()
            / chain.n_draws() as f64;
        assert!(mean_s0 > 0.8, "mean split probability {mean_s0}");
    }

    #[test]
    fn predict_sums_root_trees_and_averages() {
        let p = 2;
        let m = 5;
        let c = 0.3;
        let draw = PosteriorDraw {
            trees: (0..m).map(|_| Tree::new_root(c, p)).collect(),
            sigma: 1.0,
            split_counts: vec![0; p],
            accept_sums: vec![0.0; p],
            split_probs: None,
        };
        let chain = Chain::from_draws(
            vec![draw.clone(), draw],
            vec![PredictorType::Continuous; p],
        );
        let preds = predict(&chain, &[vec![0.2, 0.9], vec![0.7, 0.1]]).unwrap();
        for k in 0..2 {
            for i in 0..2 {
                assert!((preds.per_draw[k][i] - m as f64 * c).abs() < 1e-12);
            }
        }
        for i in 0..2 {
            let avg = (preds.per_draw[0][i] + preds.per_draw[1][i]) / 2.0;
            assert!((preds.mean[i] - avg).abs() < 1e-12);
        }
    }

    #[test]
    fn thinning_changes_draw_spacing_not_count() {
        let data = toy_data(40, 2, 12, |x| x[0], 0.2);
        let cfg = SamplerConfig {
            n_trees: 5,
            n_burn: 50,
            n_keep: 30,
            thin: 3,
            seed: 12,
            ..SamplerConfig::default()
        };
        let chain = fit_continuous(&data, &cfg).unwrap();
        assert_eq!(chain.n_draws(), 30);
    }

    #[test]
    fn dimension_mismatch_on_predict() {
        let data = toy_data(30, 3, 13, |x| x[0], 0.2);
        let chain = fit_continuous(&data, &small_cfg(13)).unwrap();
        assert!(predict(&chain, &[vec![0.1, 0.2]]).is_err());
    }
}
