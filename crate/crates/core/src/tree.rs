//! Binary regression trees: arena storage, BIRTH/DEATH proposal machinery,
//! cutpoint bookkeeping, and the acceptance-ratio decomposition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PredictorType;
use crate::error::{BartError, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NodeKind {
    Terminal {
        value: f64,
    },
    Internal {
        var: usize,
        cut: f64,
        left: NodeId,
        right: NodeId,
        /// Truncated Metropolis ratio recorded when this split was accepted.
        /// Hand-built fixtures may omit it; such splits contribute zero
        /// acceptance mass.
        birth_ratio: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub parent: Option<NodeId>,
    pub depth: u32,
    pub kind: NodeKind,
}

/// A proper binary decision tree over `n_predictors` inputs.
///
/// Nodes live in an arena; slots freed by DEATH moves are recycled. Slots not
/// reachable from the root are inert and dropped by [`Tree::compacted`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
    root: NodeId,
    n_predictors: usize,
    #[serde(skip)]
    free: Vec<NodeId>,
}

impl Tree {
    pub fn new_root(value: f64, n_predictors: usize) -> Self {
        Tree {
            nodes: vec![Node {
                parent: None,
                depth: 0,
                kind: NodeKind::Terminal { value },
            }],
            root: 0,
            n_predictors,
            free: Vec::new(),
        }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn n_predictors(&self) -> usize {
        self.n_predictors
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut Node {
        &mut self.nodes[id]
    }

    /// Ids reachable from the root, parents before children.
    pub fn live_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            out.push(id);
            if let NodeKind::Internal { left, right, .. } = self.nodes[id].kind {
                stack.push(right);
                stack.push(left);
            }
        }
        out
    }

    pub fn terminal_ids(&self) -> Vec<NodeId> {
        self.live_ids()
            .into_iter()
            .filter(|&id| matches!(self.nodes[id].kind, NodeKind::Terminal { .. }))
            .collect()
    }

    /// Number of terminal nodes, b.
    pub fn n_terminal(&self) -> usize {
        self.live_ids()
            .iter()
            .filter(|&&id| matches!(self.nodes[id].kind, NodeKind::Terminal { .. }))
            .count()
    }

    pub fn n_internal(&self) -> usize {
        self.live_ids()
            .iter()
            .filter(|&&id| matches!(self.nodes[id].kind, NodeKind::Internal { .. }))
            .count()
    }

    /// Internal nodes whose children are both terminal: the legal DEATH targets.
    pub fn second_generation_ids(&self) -> Vec<NodeId> {
        self.live_ids()
            .into_iter()
            .filter(|&id| {
                if let NodeKind::Internal { left, right, .. } = self.nodes[id].kind {
                    matches!(self.nodes[left].kind, NodeKind::Terminal { .. })
                        && matches!(self.nodes[right].kind, NodeKind::Terminal { .. })
                } else {
                    false
                }
            })
            .collect()
    }

    /// Route one observation to its leaf parameter.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_predictors {
            return Err(BartError::DimensionMismatch {
                expected: self.n_predictors,
                got: x.len(),
            });
        }
        Ok(self.leaf_value(self.leaf_for(x)))
    }

    /// Terminal node an observation routes to (x < cut goes left).
    pub fn leaf_for(&self, x: &[f64]) -> NodeId {
        let mut id = self.root;
        loop {
            match self.nodes[id].kind {
                NodeKind::Terminal { .. } => return id,
                NodeKind::Internal {
                    var,
                    cut,
                    left,
                    right,
                    ..
                } => {
                    id = if x[var] < cut { left } else { right };
                }
            }
        }
    }

    pub fn leaf_value(&self, id: NodeId) -> f64 {
        match self.nodes[id].kind {
            NodeKind::Terminal { value } => value,
            _ => panic!("leaf_value on internal node"),
        }
    }

    /// Per-predictor number of splitting rules.
    pub fn split_counts(&self, counts: &mut [u32]) {
        for id in self.live_ids() {
            if let NodeKind::Internal { var, .. } = self.nodes[id].kind {
                counts[var] += 1;
            }
        }
    }

    /// Per-predictor sum of cached acceptance ratios.
    pub fn accept_sums(&self, sums: &mut [f64]) {
        for id in self.live_ids() {
            if let NodeKind::Internal {
                var, birth_ratio, ..
            } = self.nodes[id].kind
            {
                sums[var] += birth_ratio.unwrap_or(0.0);
            }
        }
    }

    /// Canonical copy: breadth-first renumbering, recycled slots dropped.
    pub fn compacted(&self) -> Tree {
        let mut nodes = Vec::new();
        let mut queue = std::collections::VecDeque::new();
        let mut map = std::collections::HashMap::new();
        queue.push_back((self.root, None::<NodeId>));
        while let Some((old, parent)) = queue.pop_front() {
            let new_id = nodes.len();
            map.insert(old, new_id);
            let src = &self.nodes[old];
            nodes.push(Node {
                parent,
                depth: src.depth,
                kind: src.kind.clone(),
            });
            if let NodeKind::Internal { left, right, .. } = src.kind {
                queue.push_back((left, Some(new_id)));
                queue.push_back((right, Some(new_id)));
            }
        }
        // Rewire child ids to the new numbering.
        for node in nodes.iter_mut() {
            if let NodeKind::Internal { left, right, .. } = &mut node.kind {
                *left = map[&*left];
                *right = map[&*right];
            }
        }
        Tree {
            nodes,
            root: 0,
            n_predictors: self.n_predictors,
            free: Vec::new(),
        }
    }

    /// Verify structural invariants; binary-predictor reuse is checked when
    /// type tags are supplied.
    pub fn check_invariants(&self, types: Option<&[PredictorType]>) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let mut b = 0usize;
        let mut internal = 0usize;
        let mut stack = vec![(self.root, 0u32, Vec::<usize>::new())];
        while let Some((id, depth, path_bins)) = stack.pop() {
            if !seen.insert(id) {
                return Err(BartError::InvalidData(format!("node {id} visited twice")));
            }
            let node = &self.nodes[id];
            if node.depth != depth {
                return Err(BartError::InvalidData(format!(
                    "node {id} depth {} expected {depth}",
                    node.depth
                )));
            }
            match node.kind {
                NodeKind::Terminal { .. } => b += 1,
                NodeKind::Internal {
                    var, left, right, ..
                } => {
                    internal += 1;
                    for child in [left, right] {
                        if self.nodes[child].parent != Some(id) {
                            return Err(BartError::InvalidData(format!(
                                "child {child} of {id} has wrong parent"
                            )));
                        }
                    }
                    let mut bins = path_bins.clone();
                    if let Some(tags) = types {
                        if tags[var] == PredictorType::Binary {
                            if bins.contains(&var) {
                                return Err(BartError::InvalidData(format!(
                                    "binary predictor {var} reused on a path"
                                )));
                            }
                            bins.push(var);
                        }
                    }
                    stack.push((left, depth + 1, bins.clone()));
                    stack.push((right, depth + 1, bins));
                }
            }
        }
        if b != internal + 1 {
            return Err(BartError::InvalidData(format!(
                "terminal count {b} != internal {internal} + 1"
            )));
        }
        if b >= 2 {
            let w2 = self.second_generation_ids().len();
            if w2 < 1 || w2 > b / 2 {
                return Err(BartError::InvalidData(format!(
                    "w2 {w2} outside [1, {}] for b={b}",
                    b / 2
                )));
            }
        }
        Ok(())
    }
}

/// Candidate split values per predictor.
///
/// Continuous predictors get a uniform grid over the observed range; binary
/// predictors get the single midpoint between their two observed values.
/// Constant columns get no cutpoints and can never be split on.
#[derive(Debug, Clone)]
pub struct CutpointGrid {
    cuts: Vec<Vec<f64>>,
}

impl CutpointGrid {
    pub fn from_data(
        columns: &[Vec<f64>],
        types: &[PredictorType],
        n_cutpoints: usize,
    ) -> CutpointGrid {
        let cuts = columns
            .iter()
            .zip(types)
            .map(|(col, ty)| {
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !(lo < hi) {
                    return Vec::new();
                }
                match ty {
                    PredictorType::Binary => vec![0.5 * (lo + hi)],
                    PredictorType::Continuous => {
                        let step = (hi - lo) / (n_cutpoints as f64 + 1.0);
                        (1..=n_cutpoints).map(|t| lo + step * t as f64).collect()
                    }
                }
            })
            .collect();
        CutpointGrid { cuts }
    }

    pub fn n_predictors(&self) -> usize {
        self.cuts.len()
    }

    pub fn cutpoints(&self, j: usize) -> &[f64] {
        &self.cuts[j]
    }

    /// Number of cutpoints c with lo < c <= hi: exactly the splits sending at
    /// least one observation of a node with range [lo, hi] to each side.
    pub fn n_valid(&self, j: usize, lo: f64, hi: f64) -> usize {
        let cs = &self.cuts[j];
        let upper = cs.partition_point(|&c| c <= hi);
        let lower = cs.partition_point(|&c| c <= lo);
        upper.saturating_sub(lower)
    }

    /// k-th (0-based) valid cutpoint in (lo, hi].
    pub fn kth_valid(&self, j: usize, lo: f64, k: usize) -> f64 {
        let cs = &self.cuts[j];
        let lower = cs.partition_point(|&c| c <= lo);
        cs[lower + k]
    }
}

/// A BIRTH candidate: target terminal node, split, and the adjusted counts
/// p_adj (predictors with a valid cutpoint at the node) and n_adj (valid
/// cutpoints for the chosen predictor).
#[derive(Debug, Clone, PartialEq)]
pub struct BirthProposal {
    pub node: NodeId,
    pub var: usize,
    pub cut: f64,
    pub p_adj: usize,
    pub n_adj: usize,
}

/// A DEATH candidate: target second-generation internal node and the count
/// w2 of such nodes it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct DeathProposal {
    pub node: NodeId,
    pub w2: usize,
}

/// Depth-regularization parameters of the tree prior: split probability
/// gamma * (1 + depth)^-beta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreePrior {
    pub gamma: f64,
    pub beta: f64,
}

impl TreePrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(BartError::InvalidConfig("gamma must lie in (0,1)".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(BartError::InvalidConfig("beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Sufficient statistics of partial residuals routed to one node.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SuffStat {
    pub n: usize,
    pub sum: f64,
}

impl SuffStat {
    pub fn add(&mut self, r: f64) {
        self.n += 1;
        self.sum += r;
    }
}

/// The three factors of the untruncated BIRTH ratio, in log space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BirthRatio {
    pub log_nodes: f64,
    pub log_depth: f64,
    pub log_likelihood: f64,
}

impl BirthRatio {
    pub fn log_total(&self) -> f64 {
        self.log_nodes + self.log_depth + self.log_likelihood
    }

    pub fn ratio(&self) -> f64 {
        self.log_total().exp()
    }
}

/// log of the nodes ratio 2b/(b+2), b = terminal nodes of the current tree.
pub fn log_nodes_ratio(b: usize) -> f64 {
    (2.0 * b as f64 / (b as f64 + 2.0)).ln()
}

/// log of the depth ratio gamma * [1 - gamma/(2+d)^beta]^2 / [(1+d)^beta - gamma].
pub fn log_depth_ratio(depth: u32, prior: &TreePrior) -> f64 {
    let d = depth as f64;
    let g = prior.gamma;
    let b = prior.beta;
    g.ln() + 2.0 * (1.0 - g / (2.0 + d).powf(b)).ln() - ((1.0 + d).powf(b) - g).ln()
}

/// log marginal-likelihood ratio P(r | T*, sigma^2) / P(r | T, sigma^2) for a
/// split of `parent` into `left` and `right`, under the conjugate
/// Normal(0, tau^2) leaf prior.
pub fn log_likelihood_ratio(
    parent: SuffStat,
    left: SuffStat,
    right: SuffStat,
    sigma2: f64,
    tau2: f64,
) -> Result<f64> {
    if sigma2 <= 0.0 {
        return Err(BartError::InvalidConfig("sigma^2 must be positive".into()));
    }
    if left.n == 0 || right.n == 0 {
        return Err(BartError::InvalidData("empty proposed child".into()));
    }
    debug_assert_eq!(parent.n, left.n + right.n);
    let vp = sigma2 + parent.n as f64 * tau2;
    let vl = sigma2 + left.n as f64 * tau2;
    let vr = sigma2 + right.n as f64 * tau2;
    let log_det = 0.5 * (sigma2.ln() + vp.ln() - vl.ln() - vr.ln());
    let quad = tau2 / (2.0 * sigma2)
        * (left.sum * left.sum / vl + right.sum * right.sum / vr - parent.sum * parent.sum / vp);
    Ok(log_det + quad)
}

/// Truncated Metropolis acceptance probability min{1, r}.
pub fn metropolis_acceptance(r: f64) -> Result<f64> {
    if !r.is_finite() || r <= 0.0 {
        return Err(BartError::Numerical(format!(
            "Metropolis ratio must be positive and finite, got {r}"
        )));
    }
    Ok(r.min(1.0))
}

/// Assemble the BIRTH ratio decomposition for a proposal against a tree,
/// routing `resid` through the tree to rebuild the node's sufficient
/// statistics. Fitting code uses the incremental path; this entry point
/// serves diagnostics and tests.
pub fn birth_ratio_components(
    tree: &Tree,
    proposal: &BirthProposal,
    columns: &[Vec<f64>],
    resid: &[f64],
    sigma2: f64,
    prior: &TreePrior,
    tau2: f64,
) -> Result<BirthRatio> {
    prior.validate()?;
    if sigma2 <= 0.0 {
        return Err(BartError::InvalidConfig("sigma^2 must be positive".into()));
    }
    let node = tree.node(proposal.node);
    if !matches!(node.kind, NodeKind::Terminal { .. }) {
        return Err(BartError::InvalidConfig(
            "BIRTH target must be a terminal node".into(),
        ));
    }
    let mut parent = SuffStat::default();
    let mut left = SuffStat::default();
    let mut right = SuffStat::default();
    for i in 0..resid.len() {
        let x: Vec<f64> = columns.iter().map(|c| c[i]).collect();
        if tree.leaf_for(&x) == proposal.node {
            parent.add(resid[i]);
            if x[proposal.var] < proposal.cut {
                left.add(resid[i]);
            } else {
                right.add(resid[i]);
            }
        }
    }
    Ok(BirthRatio {
        log_nodes: log_nodes_ratio(tree.n_terminal()),
        log_depth: log_depth_ratio(node.depth, prior),
        log_likelihood: log_likelihood_ratio(parent, left, right, sigma2, tau2)?,
    })
}

/// A tree under construction: the tree plus per-node observation lists and
/// lazily filled per-node caches of observed predictor ranges and valid
/// splits. A node's observation set is fixed for its lifetime (and a DEATH
/// restores the pre-BIRTH set), so the caches never need invalidation.
#[derive(Debug, Clone)]
pub struct TreeFit {
    pub tree: Tree,
    node_obs: Vec<Vec<u32>>,
    minmax: Vec<Option<Box<[(f64, f64)]>>>,
    /// Per node: (predictor, number of valid cutpoints) for every predictor
    /// with at least one valid cutpoint.
    valid: Vec<Option<Box<[(u32, u32)]>>>,
}

impl TreeFit {
    pub fn new(n_obs: usize, n_predictors: usize, leaf: f64) -> TreeFit {
        TreeFit {
            tree: Tree::new_root(leaf, n_predictors),
            node_obs: vec![(0..n_obs as u32).collect()],
            minmax: vec![None],
            valid: vec![None],
        }
    }

    pub fn obs(&self, id: NodeId) -> &[u32] {
        &self.node_obs[id]
    }

    fn ensure_minmax(&mut self, id: NodeId, columns: &[Vec<f64>]) {
        if self.minmax[id].is_some() {
            return;
        }
        let p = columns.len();
        let mut mm = vec![(f64::INFINITY, f64::NEG_INFINITY); p];
        let obs = &self.node_obs[id];
        for (j, col) in columns.iter().enumerate() {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &i in obs {
                let v = col[i as usize];
                if v < lo {
                    lo = v;
                }
                if v > hi {
                    hi = v;
                }
            }
            mm[j] = (lo, hi);
        }
        self.minmax[id] = Some(mm.into_boxed_slice());
    }

    fn ensure_valid(&mut self, id: NodeId, columns: &[Vec<f64>], grid: &CutpointGrid) {
        if self.valid[id].is_some() {
            return;
        }
        self.ensure_minmax(id, columns);
        let mm = self.minmax[id].as_ref().unwrap();
        let list: Vec<(u32, u32)> = (0..columns.len())
            .filter_map(|j| {
                let k = grid.n_valid(j, mm[j].0, mm[j].1);
                (k > 0).then_some((j as u32, k as u32))
            })
            .collect();
        self.valid[id] = Some(list.into_boxed_slice());
    }

    /// Whether a specific terminal node admits a valid split.
    pub fn node_growable(&mut self, id: NodeId, columns: &[Vec<f64>], grid: &CutpointGrid) -> bool {
        if let Some(list) = &self.valid[id] {
            return !list.is_empty();
        }
        self.ensure_minmax(id, columns);
        let mm = self.minmax[id].as_ref().unwrap();
        (0..columns.len()).any(|j| grid.n_valid(j, mm[j].0, mm[j].1) > 0)
    }

    /// Whether any terminal node admits a valid split.
    pub fn has_growable(&mut self, columns: &[Vec<f64>], grid: &CutpointGrid) -> bool {
        self.tree
            .terminal_ids()
            .into_iter()
            .any(|id| self.node_growable(id, columns, grid))
    }

    /// Draw a BIRTH proposal: target uniform over growable terminal nodes,
    /// predictor uniform over the p_adj valid predictors (or weighted when
    /// `weights` is given), cutpoint uniform over the n_adj valid values.
    pub fn propose_birth<R: Rng + ?Sized>(
        &mut self,
        columns: &[Vec<f64>],
        grid: &CutpointGrid,
        rng: &mut R,
        weights: Option<&[f64]>,
    ) -> Option<BirthProposal> {
        let growable: Vec<NodeId> = self
            .tree
            .terminal_ids()
            .into_iter()
            .filter(|&id| self.node_growable(id, columns, grid))
            .collect();
        if growable.is_empty() {
            return None;
        }
        let node = growable[rng.random_range(0..growable.len())];
        self.ensure_valid(node, columns, grid);
        let valid = self.valid[node].as_deref().unwrap();
        let p_adj = valid.len();
        let (var, n_adj) = match weights {
            None => {
                let (j, k) = valid[rng.random_range(0..p_adj)];
                (j as usize, k as usize)
            }
            Some(w) => {
                let total: f64 = valid.iter().map(|&(j, _)| w[j as usize]).sum();
                let mut u = rng.random::<f64>() * total;
                let mut chosen = valid[p_adj - 1];
                for &(j, k) in valid {
                    u -= w[j as usize];
                    if u <= 0.0 {
                        chosen = (j, k);
                        break;
                    }
                }
                (chosen.0 as usize, chosen.1 as usize)
            }
        };
        let mm_var = self.minmax[node].as_ref().unwrap()[var];
        let cut = grid.kth_valid(var, mm_var.0, rng.random_range(0..n_adj));
        Some(BirthProposal {
            node,
            var,
            cut,
            p_adj,
            n_adj,
        })
    }

    /// Draw a DEATH proposal: target uniform over the w2 second-generation
    /// internal nodes. Unavailable for a root-only tree.
    pub fn propose_death<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<DeathProposal> {
        let targets = self.tree.second_generation_ids();
        if targets.is_empty() {
            return None;
        }
        let w2 = targets.len();
        Some(DeathProposal {
            node: targets[rng.random_range(0..w2)],
            w2,
        })
    }

    /// Sufficient statistics (parent, left, right) of `resid` for a proposal.
    pub fn birth_stats(
        &self,
        columns: &[Vec<f64>],
        prop: &BirthProposal,
        resid: &[f64],
        leaf_fit: f64,
    ) -> (SuffStat, SuffStat, SuffStat) {
        let mut parent = SuffStat::default();
        let mut left = SuffStat::default();
        let mut right = SuffStat::default();
        let col = &columns[prop.var];
        for &i in &self.node_obs[prop.node] {
            let r = resid[i as usize] + leaf_fit;
            parent.add(r);
            if col[i as usize] < prop.cut {
                left.add(r);
            } else {
                right.add(r);
            }
        }
        (parent, left, right)
    }

    /// Commit an accepted BIRTH; stores the truncated acceptance ratio on the
    /// new split node. Children keep the parent's leaf value until the next
    /// leaf draw.
    pub fn apply_birth(&mut self, columns: &[Vec<f64>], prop: &BirthProposal, accepted_ratio: f64) {
        let value = self.tree.leaf_value(prop.node);
        let depth = self.tree.node(prop.node).depth;
        let left = self.alloc(Node {
            parent: Some(prop.node),
            depth: depth + 1,
            kind: NodeKind::Terminal { value },
        });
        let right = self.alloc(Node {
            parent: Some(prop.node),
            depth: depth + 1,
            kind: NodeKind::Terminal { value },
        });
        let obs = std::mem::take(&mut self.node_obs[prop.node]);
        let col = &columns[prop.var];
        let (mut lo, mut ro) = (Vec::new(), Vec::new());
        for i in obs {
            if col[i as usize] < prop.cut {
                lo.push(i);
            } else {
                ro.push(i);
            }
        }
        self.node_obs[left] = lo;
        self.node_obs[right] = ro;
        self.tree.node_mut(prop.node).kind = NodeKind::Internal {
            var: prop.var,
            cut: prop.cut,
            left,
            right,
            birth_ratio: Some(accepted_ratio),
        };
    }

    /// Commit an accepted DEATH: the target's children are recycled and their
    /// observations merged back into the target, which becomes terminal.
    pub fn apply_death(&mut self, prop: &DeathProposal) {
        let (left, right) = match self.tree.node(prop.node).kind {
            NodeKind::Internal { left, right, .. } => (left, right),
            _ => panic!("DEATH target must be internal"),
        };
        let mut obs = std::mem::take(&mut self.node_obs[left]);
        obs.append(&mut self.node_obs[right]);
        self.node_obs[prop.node] = obs;
        // The merged observation set equals the pre-birth set, so a cached
        // range for the target is still exact; the children caches are stale.
        self.release(left);
        self.release(right);
        self.tree.node_mut(prop.node).kind = NodeKind::Terminal { value: 0.0 };
    }

    fn alloc(&mut self, node: Node) -> NodeId {
        if let Some(id) = self.tree.free.pop() {
            self.tree.nodes[id] = node;
            self.node_obs[id].clear();
            self.minmax[id] = None;
            self.valid[id] = None;
            id
        } else {
            self.tree.nodes.push(node);
            self.node_obs.push(Vec::new());
            self.minmax.push(None);
            self.valid.push(None);
            self.tree.nodes.len() - 1
        }
    }

    fn release(&mut self, id: NodeId) {
        self.tree.nodes[id] = Node {
            parent: None,
            depth: 0,
            kind: NodeKind::Terminal { value: f64::NAN },
        };
        self.node_obs[id].clear();
        self.minmax[id] = None;
        self.valid[id] = None;
        self.tree.free.push(id);
    }

    /// Verify that the terminal observation lists partition 0..n and agree
    /// with routing from the root.
    pub fn check_routing(&self, columns: &[Vec<f64>], n_obs: usize) -> Result<()> {
        let mut seen = vec![false; n_obs];
        for id in self.tree.terminal_ids() {
            for &i in &self.node_obs[id] {
                let i = i as usize;
                if seen[i] {
                    return Err(BartError::InvalidData(format!("obs {i} listed twice")));
                }
                seen[i] = true;
                let x: Vec<f64> = columns.iter().map(|c| c[i]).collect();
                if self.tree.leaf_for(&x) != id {
                    return Err(BartError::InvalidData(format!(
                        "obs {i} routes away from its list"
                    )));
                }
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(BartError::InvalidData("unrouted observation".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn cols(p: usize, data: &[&[f64]]) -> Vec<Vec<f64>> {
        assert_eq!(data.len(), p);
        data.iter().map(|c| c.to_vec()).collect()
    }

    /// Hand-built depth-2 tree:
    /// root splits x1 < 0.5; left child splits x2 < 0.3; right splits x2 < 0.7.
    fn depth2_fixture() -> Tree {
        let mut t = Tree::new_root(0.0, 2);
        t.nodes = vec![
            Node {
                parent: None,
                depth: 0,
                kind: NodeKind::Internal {
                    var: 0,
                    cut: 0.5,
                    left: 1,
                    right: 2,
                    birth_ratio: Some(1.0),
                },
            },
            Node {
                parent: Some(0),
                depth: 1,
                kind: NodeKind::Internal {
                    var: 1,
                    cut: 0.3,
                    left: 3,
                    right: 4,
                    birth_ratio: Some(0.9),
                },
            },
            Node {
                parent: Some(0),
                depth: 1,
                kind: NodeKind::Internal {
                    var: 1,
                    cut: 0.7,
                    left: 5,
                    right: 6,
                    birth_ratio: Some(0.8),
                },
            },
            Node {
                parent: Some(1),
                depth: 2,
                kind: NodeKind::Terminal { value: 1.0 },
            },
            Node {
                parent: Some(1),
                depth: 2,
                kind: NodeKind::Terminal { value: 2.0 },
            },
            Node {
                parent: Some(2),
                depth: 2,
                kind: NodeKind::Terminal { value: 3.0 },
            },
            Node {
                parent: Some(2),
                depth: 2,
                kind: NodeKind::Terminal { value: 4.0 },
            },
        ];
        t
    }

    #[test]
    fn evaluate_degenerate_tree() {
        let t = Tree::new_root(2.5, 3);
        assert_eq!(t.evaluate(&[0.1, 0.9, 0.5]).unwrap(), 2.5);
        assert_eq!(t.evaluate(&[9.0, -9.0, 0.0]).unwrap(), 2.5);
    }

    #[test]
    fn evaluate_one_split() {
        let mut t = Tree::new_root(0.0, 1);
        t.nodes = vec![
            Node {
                parent: None,
                depth: 0,
                kind: NodeKind::Internal {
                    var: 0,
                    cut: 0.5,
                    left: 1,
                    right: 2,
                    birth_ratio: None,
                },
            },
            Node {
                parent: Some(0),
                depth: 1,
                kind: NodeKind::Terminal { value: -1.0 },
            },
            Node {
                parent: Some(0),
                depth: 1,
                kind: NodeKind::Terminal { value: 1.0 },
            },
        ];
        assert_eq!(t.evaluate(&[0.3]).unwrap(), -1.0);
        assert_eq!(t.evaluate(&[0.7]).unwrap(), 1.0);
        assert!(t.evaluate(&[0.3, 0.4]).is_err());
    }

    #[test]
    fn evaluate_depth2_against_path_walk() {
        // Independent oracle: explicit nested conditionals.
        fn oracle(x1: f64, x2: f64) -> f64 {
            if x1 < 0.5 {
                if x2 < 0.3 {
                    1.0
                } else {
                    2.0
                }
            } else if x2 < 0.7 {
                3.0
            } else {
                4.0
            }
        }
        let t = depth2_fixture();
        let probes = [
            (0.1, 0.1),
            (0.1, 0.9),
            (0.4, 0.29),
            (0.4, 0.31),
            (0.6, 0.1),
            (0.6, 0.69),
            (0.9, 0.71),
            (0.9, 0.99),
        ];
        for (x1, x2) in probes {
            assert_eq!(t.evaluate(&[x1, x2]).unwrap(), oracle(x1, x2), "({x1},{x2})");
        }
        t.check_invariants(None).unwrap();
    }

    #[test]
    fn grid_counts_valid_cutpoints() {
        let columns = cols(2, &[&[0.0, 1.0, 0.0, 1.0], &[0.0, 0.25, 0.5, 1.0]]);
        let types = [PredictorType::Binary, PredictorType::Continuous];
        let grid = CutpointGrid::from_data(&columns, &types, 4);
        assert_eq!(grid.cutpoints(0), &[0.5]);
        for (got, want) in grid.cutpoints(1).iter().zip([0.2, 0.4, 0.6, 0.8]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(grid.n_valid(0, 0.0, 1.0), 1);
        assert_eq!(grid.n_valid(0, 1.0, 1.0), 0); // constant node
        assert_eq!(grid.n_valid(1, 0.0, 0.5), 2); // 0.2 and 0.4
        assert_eq!(grid.kth_valid(1, 0.0, 1), 0.4);
    }

    #[test]
    fn birth_root_only_single_binary() {
        let columns = cols(1, &[&[0.0, 1.0, 0.0, 1.0]]);
        let types = [PredictorType::Binary];
        let grid = CutpointGrid::from_data(&columns, &types, 100);
        let mut fit = TreeFit::new(4, 1, 0.0);
        let mut rng = rng_for(3, 0);
        let prop = fit.propose_birth(&columns, &grid, &mut rng, None).unwrap();
        assert_eq!(prop.node, fit.tree.root());
        assert_eq!(prop.var, 0);
        assert_eq!(prop.p_adj, 1);
        assert_eq!(prop.n_adj, 1);
        assert_eq!(prop.cut, 0.5);
    }

    #[test]
    fn birth_unavailable_on_constant_data() {
        let columns = cols(2, &[&[1.0, 1.0, 1.0], &[2.0, 2.0, 2.0]]);
        let types = [PredictorType::Continuous, PredictorType::Continuous];
        let grid = CutpointGrid::from_data(&columns, &types, 100);
        let mut fit = TreeFit::new(3, 2, 0.0);
        let mut rng = rng_for(4, 0);
        assert!(fit.propose_birth(&columns, &grid, &mut rng, None).is_none());
        assert!(!fit.has_growable(&columns, &grid));
    }

    #[test]
    fn birth_predictor_choice_uniform_over_valid() {
        // p=3, all with valid cutpoints at the root; 10^4 proposals should be
        // multinomially uniform: 3 sigma band around N/3 with sigma =
        // sqrt(N * (1/3)(2/3)).
        let n = 30;
        let base: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let columns = vec![base.clone(), base.clone(), base.clone()];
        let types = [PredictorType::Continuous; 3];
        let grid = CutpointGrid::from_data(&columns, &types, 10);
        let mut fit = TreeFit::new(n, 3, 0.0);
        let mut rng = rng_for(5, 0);
        let trials = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..trials {
            let prop = fit.propose_birth(&columns, &grid, &mut rng, None).unwrap();
            assert_eq!(prop.p_adj, 3);
            counts[prop.var] += 1;
        }
        let expect = trials as f64 / 3.0;
        let sigma = (trials as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in counts {
            assert!(
                (c as f64 - expect).abs() < 3.0 * sigma,
                "counts {counts:?} outside 3 sigma"
            );
        }
    }

    #[test]
    fn death_single_split_prunes_root() {
        let columns = cols(1, &[&[0.0, 1.0]]);
        let types = [PredictorType::Binary];
        let grid = CutpointGrid::from_data(&columns, &types, 100);
        let mut fit = TreeFit::new(2, 1, 0.0);
        let mut rng = rng_for(6, 0);
        let prop = fit.propose_birth(&columns, &grid, &mut rng, None).unwrap();
        fit.apply_birth(&columns, &prop, 0.7);
        let death = fit.propose_death(&mut rng).unwrap();
        assert_eq!(death.node, fit.tree.root());
        assert_eq!(death.w2, 1);
        fit.apply_death(&death);
        assert_eq!(fit.tree.n_terminal(), 1);
        assert!(fit.propose_death(&mut rng).is_none());
    }

    #[test]
    fn death_uniform_over_second_generation() {
        // Grow a tree with w2 = 3 by hand, then check draw frequencies.
        let n = 64;
        let c0: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let c1: Vec<f64> = (0..n).map(|i| ((i / 2) % 2) as f64).collect();
        let c2: Vec<f64> = (0..n).map(|i| ((i / 4) % 2) as f64).collect();
        let columns = vec![c0, c1, c2];
        let types = [PredictorType::Binary; 3];
        let grid = CutpointGrid::from_data(&columns, &types, 100);
        let mut fit = TreeFit::new(n, 3, 0.0);
        // Split root on x1, then split both children on x2 and x3: the root's
        // children are both second-generation, and so is... build depth so
        // that exactly three second-generation nodes exist.
        let root = fit.tree.root();
        fit.apply_birth(
            &columns,
            &BirthProposal {
                node: root,
                var: 0,
                cut: 0.5,
                p_adj: 3,
                n_adj: 1,
            },
            1.0,
        );
        let (l, r) = match fit.tree.node(root).kind {
            NodeKind::Internal { left, right, .. } => (left, right),
            _ => unreachable!(),
        };
        for child in [l, r] {
            fit.apply_birth(
                &columns,
                &BirthProposal {
                    node: child,
                    var: 1,
                    cut: 0.5,
                    p_adj: 2,
                    n_adj: 1,
                },
                1.0,
            );
        }
        // Split both grandchildren under l on x3: l stops being second
        // generation while its two children become so, alongside r.
        let (ll, lr) = match fit.tree.node(l).kind {
            NodeKind::Internal { left, right, .. } => (left, right),
            _ => unreachable!(),
        };
        for node in [ll, lr] {
            fit.apply_birth(
                &columns,
                &BirthProposal {
                    node,
                    var: 2,
                    cut: 0.5,
                    p_adj: 1,
                    n_adj: 1,
                },
                1.0,
            );
        }
        let targets = fit.tree.second_generation_ids();
        assert_eq!(targets.len(), 3);
        fit.tree.check_invariants(Some(&types)).unwrap();
        fit.check_routing(&columns, n).unwrap();

        let mut rng = rng_for(7, 0);
        let trials = 10_000;
        let mut hist = std::collections::HashMap::new();
        for _ in 0..trials {
            let d = fit.propose_death(&mut rng).unwrap();
            assert_eq!(d.w2, 3);
            *hist.entry(d.node).or_insert(0usize) += 1;
        }
        let expect = trials as f64 / 3.0;
        let sigma = (trials as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for (_, c) in hist {
            assert!((c as f64 - expect).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn nodes_ratio_b1() {
        assert!((log_nodes_ratio(1).exp() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn depth_ratio_default_hyperparameters() {
        // gamma 0.95, beta 2, depth 0: 0.95*(1-0.95/4)^2/(1-0.95).
        let prior = TreePrior {
            gamma: 0.95,
            beta: 2.0,
        };
        let got = log_depth_ratio(0, &prior).exp();
        assert!((got - 11.04671875).abs() < 1e-10, "got {got}");
    }

    #[test]
    fn metropolis_acceptance_truncates() {
        assert_eq!(metropolis_acceptance(0.3).unwrap(), 0.3);
        assert_eq!(metropolis_acceptance(11.05).unwrap(), 1.0);
        assert_eq!(metropolis_acceptance(1.0).unwrap(), 1.0);
        assert!(metropolis_acceptance(0.0).is_err());
        assert!(metropolis_acceptance(-1.0).is_err());
        assert!(metropolis_acceptance(f64::NAN).is_err());
    }

    /// Composite-Simpson integration of the leaf-mean marginal likelihood.
    fn marginal_by_quadrature(resid: &[f64], sigma2: f64, tau2: f64) -> f64 {
        let n = resid.len() as f64;
        let s: f64 = resid.iter().sum();
        let v = 1.0 / (n / sigma2 + 1.0 / tau2);
        let m = v * s / sigma2;
        let half_width = 12.0 * v.sqrt();
        let (a, b) = (m - half_width, m + half_width);
        let steps = 40_000usize;
        let h = (b - a) / steps as f64;
        let integrand = |mu: f64| -> f64 {
            let mut log_f = -0.5 * mu * mu / tau2 - 0.5 * (2.0 * std::f64::consts::PI * tau2).ln();
            for &r in resid {
                let d = r - mu;
                log_f += -0.5 * d * d / sigma2 - 0.5 * (2.0 * std::f64::consts::PI * sigma2).ln();
            }
            log_f.exp()
        };
        let mut acc = integrand(a) + integrand(b);
        for k in 1..steps {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * integrand(a + h * k as f64);
        }
        acc * h / 3.0
    }

    #[test]
    fn likelihood_ratio_matches_quadrature_oracle() {
        // 6-observation fixture split 3/3; closed form against direct
        // integration of both marginal likelihoods.
        let resid = [0.21, -0.35, 0.12, 0.4, -0.05, -0.18];
        let (sigma2, tau2) = (0.35, 0.2);
        let left = &resid[..3];
        let right = &resid[3..];
        let suff = |r: &[f64]| SuffStat {
            n: r.len(),
            sum: r.iter().sum(),
        };
        let closed =
            log_likelihood_ratio(suff(&resid), suff(left), suff(right), sigma2, tau2).unwrap();
        let direct = (marginal_by_quadrature(left, sigma2, tau2)
            * marginal_by_quadrature(right, sigma2, tau2)
            / marginal_by_quadrature(&resid, sigma2, tau2))
        .ln();
        assert!(
            (closed - direct).abs() < 1e-12_f64.max(1e-12 * direct.abs()),
            "closed {closed} direct {direct}"
        );
    }

    #[test]
    fn likelihood_ratio_rejects_bad_inputs() {
        let s = SuffStat { n: 2, sum: 0.3 };
        let e = SuffStat { n: 0, sum: 0.0 };
        let f = SuffStat { n: 2, sum: 0.3 };
        assert!(log_likelihood_ratio(s, e, f, 1.0, 1.0).is_err());
        assert!(log_likelihood_ratio(s, f, e, -1.0, 1.0).is_err());
    }

    #[test]
    fn birth_and_death_keep_invariants_and_partition() {
        let n = 200;
        let mut rng = rng_for(8, 0);
        let columns: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..n).map(|_| rng.random::<f64>()).collect())
            .collect();
        let types = [PredictorType::Continuous; 4];
        let grid = CutpointGrid::from_data(&columns, &types, 50);
        let mut fit = TreeFit::new(n, 4, 0.0);
        let mut b = 1usize;
        for step in 0..500 {
            if rng.random::<f64>() < 0.6 {
                if let Some(prop) = fit.propose_birth(&columns, &grid, &mut rng, None) {
                    fit.apply_birth(&columns, &prop, 0.5);
                    b += 1;
                }
            } else if let Some(prop) = fit.propose_death(&mut rng) {
                fit.apply_death(&prop);
                b -= 1;
            }
            assert_eq!(fit.tree.n_terminal(), b, "step {step}");
            fit.tree.check_invariants(Some(&types)).unwrap();
            fit.check_routing(&columns, n).unwrap();
        }
    }

    #[test]
    fn compacted_preserves_structure() {
        let columns = cols(1, &[&[0.0, 0.3, 0.6, 1.0]]);
        let types = [PredictorType::Continuous];
        let grid = CutpointGrid::from_data(&columns, &types, 10);
        let mut fit = TreeFit::new(4, 1, 0.0);
        let mut rng = rng_for(9, 0);
        for _ in 0..20 {
            if let Some(prop) = fit.propose_birth(&columns, &grid, &mut rng, None) {
                fit.apply_birth(&columns, &prop, 0.4);
            }
            if rng.random::<f64>() < 0.3 {
                if let Some(prop) = fit.propose_death(&mut rng) {
                    fit.apply_death(&prop);
                }
            }
        }
        let compact = fit.tree.compacted();
        compact.check_invariants(None).unwrap();
        assert_eq!(compact.n_terminal(), fit.tree.n_terminal());
        for probe in [0.05, 0.25, 0.45, 0.65, 0.85] {
            assert_eq!(
                compact.evaluate(&[probe]).unwrap(),
                fit.tree.evaluate(&[probe]).unwrap()
            );
        }
    }
}
