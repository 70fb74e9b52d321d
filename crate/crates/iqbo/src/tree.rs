//! Budgeted multi-resolution search over a hierarchical partition of the
//! query space.
//!
//! The query domain is split by a K-ary tree (K = 2^d, every axis bisected)
//! whose nodes carry a depth-dependent evaluation cost and observation noise.
//! Each step selects the candidate node maximizing information gain per unit
//! cost among the current leaves and their pre-materialized children, then
//! refines the partition around the selection and debits the budget.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;

use crate::acquisition::{cmes_score_from_stats, MaxValueSamples, PosteriorOverA};
use crate::{Error, Result};

/// Axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl AxisBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::invalid("box bounds must be nonempty and equal length"));
        }
        for (l, h) in lo.iter().zip(&hi) {
            if !(l.is_finite() && h.is_finite()) {
                return Err(Error::NonFiniteInput);
            }
            if !(h > l) {
                return Err(Error::invalid("degenerate box: hi must exceed lo on every axis"));
            }
        }
        Ok(AxisBox { lo, hi })
    }

    pub fn unit(dim: usize) -> Self {
        AxisBox {
            lo: vec![0.0; dim],
            hi: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (h - l))
            .collect()
    }

    pub fn measure(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(v, (l, h))| v.clamp(*l, *h))
            .collect()
    }
}

/// One cell of the partition tree.
#[derive(Debug, Clone)]
pub struct TreeNode {
    pub id: usize,
    pub depth: usize,
    pub center: Vec<f64>,
    /// Per-axis cell half-width: domain half-width scaled by 2^-depth.
    pub radius: Vec<f64>,
    pub parent: Option<usize>,
    /// Empty until materialized (and permanently empty at max depth).
    pub children: Vec<usize>,
}

impl TreeNode {
    pub fn cell(&self) -> AxisBox {
        AxisBox {
            lo: self
                .center
                .iter()
                .zip(&self.radius)
                .map(|(c, r)| c - r)
                .collect(),
            hi: self
                .center
                .iter()
                .zip(&self.radius)
                .map(|(c, r)| c + r)
                .collect(),
        }
    }
}

/// K-ary partition tree over an axis-aligned domain; each split bisects
/// every axis, so K = 2^dim.
#[derive(Debug, Clone)]
pub struct PartitionTree {
    pub domain: AxisBox,
    nodes: Vec<TreeNode>,
    k: usize,
    max_depth: usize,
}

impl PartitionTree {
    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    /// Child ids of `id`, creating the child nodes on first call.
    /// Nodes at max depth have no children.
    pub fn ensure_children(&mut self, id: usize) -> Vec<usize> {
        if !self.nodes[id].children.is_empty() || self.nodes[id].depth >= self.max_depth {
            return self.nodes[id].children.clone();
        }
        let dim = self.domain.dim();
        let parent = self.nodes[id].clone();
        let mut ids = Vec::with_capacity(self.k);
        for corner in 0..self.k {
            let mut center = Vec::with_capacity(dim);
            let mut radius = Vec::with_capacity(dim);
            for axis in 0..dim {
                let r = 0.5 * parent.radius[axis];
                let sign = if (corner >> axis) & 1 == 1 { 1.0 } else { -1.0 };
                center.push(parent.center[axis] + sign * r);
                radius.push(r);
            }
            let child_id = self.nodes.len();
            self.nodes.push(TreeNode {
                id: child_id,
                depth: parent.depth + 1,
                center,
                radius,
                parent: Some(id),
                children: Vec::new(),
            });
            ids.push(child_id);
        }
        self.nodes[id].children = ids.clone();
        ids
    }
}

/// The candidate pool: current leaves plus their pre-materialized children.
#[derive(Debug, Clone, Default)]
pub struct ActiveSet {
    pub leaves: BTreeSet<usize>,
    pub frontier: BTreeSet<usize>,
}

impl ActiveSet {
    /// Candidate ids, sorted (the tie-break order).
    pub fn candidates(&self) -> Vec<usize> {
        self.leaves.union(&self.frontier).copied().collect()
    }

    /// Rebuild the frontier as the children of all current leaves. The
    /// per-step child additions are idempotent, so the running union equals
    /// this recomputation.
    fn refresh_frontier(&mut self, tree: &mut PartitionTree) {
        let leaves: Vec<usize> = self.leaves.iter().copied().collect();
        self.frontier.clear();
        for leaf in leaves {
            for child in tree.ensure_children(leaf) {
                self.frontier.insert(child);
            }
        }
    }

    /// Check the structural laws: disjointness, frontier parentage, and the
    /// exact tiling of the domain by leaf cells.
    pub fn validate(&self, tree: &PartitionTree) -> Result<()> {
        if self.leaves.intersection(&self.frontier).next().is_some() {
            return Err(Error::invalid("leaves and frontier overlap"));
        }
        for &id in &self.frontier {
            let parent = tree.node(id).parent.ok_or_else(|| Error::invalid("frontier root"))?;
            if !self.leaves.contains(&parent) {
                return Err(Error::invalid("frontier node without leaf parent"));
            }
        }
        let total: f64 = self.leaves.iter().map(|&id| tree.node(id).cell().measure()).sum();
        let domain = tree.domain.measure();
        if ((total - domain) / domain).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "leaf cells measure {total} but domain measures {domain}"
            )));
        }
        // bisection cells at equal depth are identical or interior-disjoint,
        // so exact total measure implies a tiling; also spot-check pairwise
        // interior disjointness directly
        let ids: Vec<usize> = self.leaves.iter().copied().collect();
        for (i, &a) in ids.iter().enumerate() {
            let ca = tree.node(a).cell();
            for &b in &ids[i + 1..] {
                let cb = tree.node(b).cell();
                let overlaps = ca
                    .lo
                    .iter()
                    .zip(&ca.hi)
                    .zip(cb.lo.iter().zip(&cb.hi))
                    .all(|((alo, ahi), (blo, bhi))| alo < bhi && blo < ahi);
                if overlaps {
                    return Err(Error::invalid(format!("leaf cells {a} and {b} overlap")));
                }
            }
        }
        Ok(())
    }
}

/// Depth-indexed evaluation cost, observation noise, and resolution scale.
#[derive(Debug, Clone)]
pub struct CostSchedule {
    costs: Vec<f64>,
    noise_sds: Vec<f64>,
    resolutions: Vec<f64>,
}

impl CostSchedule {
    pub fn new(costs: Vec<f64>, noise_sds: Vec<f64>, resolutions: Vec<f64>) -> Result<Self> {
        if costs.is_empty() || costs.len() != noise_sds.len() || costs.len() != resolutions.len() {
            return Err(Error::invalid("schedule vectors must be nonempty and equal length"));
        }
        for w in costs.windows(2) {
            if w[1] < w[0] {
                return Err(Error::invalid("costs must be non-decreasing in depth"));
            }
        }
        for w in noise_sds.windows(2) {
            if w[1] > w[0] {
                return Err(Error::invalid("noise must be non-increasing in depth"));
            }
        }
        if costs.iter().any(|c| !(*c > 0.0))
            || noise_sds.iter().any(|s| !(*s > 0.0))
            || resolutions.iter().any(|r| !(*r > 0.0))
        {
            return Err(Error::invalid("schedule entries must be positive"));
        }
        Ok(CostSchedule {
            costs,
            noise_sds,
            resolutions,
        })
    }

    /// Default schedule for a unit domain: a depth-l cell has half-width
    /// d(l) = 2^-(l+1), cost 0.5 log2(1/d(l)) = 0.5 (l+1), noise sd equal to
    /// the reciprocal cost, and resolution scale d(l).
    pub fn defaults(max_depth: usize) -> Self {
        let mut costs = Vec::with_capacity(max_depth + 1);
        let mut noise = Vec::with_capacity(max_depth + 1);
        let mut res = Vec::with_capacity(max_depth + 1);
        for l in 0..=max_depth {
            let d = 2f64.powi(-(l as i32 + 1));
            let cost = 0.5 * (1.0 / d).log2();
            costs.push(cost);
            noise.push(0.5 / cost);
            res.push(d);
        }
        CostSchedule {
            costs,
            noise_sds: noise,
            resolutions: res,
        }
    }

    pub fn cost(&self, depth: usize) -> f64 {
        self.costs[depth.min(self.costs.len() - 1)]
    }

    pub fn noise_sd(&self, depth: usize) -> f64 {
        self.noise_sds[depth.min(self.noise_sds.len() - 1)]
    }

    pub fn resolution(&self, depth: usize) -> f64 {
        self.resolutions[depth.min(self.resolutions.len() - 1)]
    }

    pub fn min_cost(&self) -> f64 {
        self.costs[0]
    }
}

/// Budget accounting; `remaining + spent` equals the initial budget exactly
/// because costs are dyadic rationals.
#[derive(Debug, Clone)]
pub struct BudgetState {
    pub initial: f64,
    pub remaining: f64,
    pub spent: f64,
    pub ledger: Vec<(usize, f64)>,
}

impl BudgetState {
    pub fn new(budget: f64) -> Result<Self> {
        if !(budget > 0.0) {
            return Err(Error::invalid("budget must be positive"));
        }
        Ok(BudgetState {
            initial: budget,
            remaining: budget,
            spent: 0.0,
            ledger: Vec::new(),
        })
    }

    fn debit(&mut self, node: usize, cost: f64) {
        self.remaining -= cost;
        self.spent += cost;
        self.ledger.push((node, cost));
    }
}

/// Build a fresh tree: root leaf spanning the domain with its children
/// pre-materialized as the frontier.
pub fn init_tree(domain: AxisBox, k: usize, max_depth: usize) -> Result<(PartitionTree, ActiveSet)> {
    let dim = domain.dim();
    if k != 1usize << dim {
        return Err(Error::invalid(format!(
            "K must be 2^dim (got K={k} for dim={dim})"
        )));
    }
    if max_depth < 1 {
        return Err(Error::invalid("max_depth must be >= 1"));
    }
    let root = TreeNode {
        id: 0,
        depth: 0,
        center: domain.center(),
        radius: domain.half_widths(),
        parent: None,
        children: Vec::new(),
    };
    let mut tree = PartitionTree {
        domain,
        nodes: vec![root],
        k,
        max_depth,
    };
    let mut active = ActiveSet::default();
    active.leaves.insert(0);
    active.refresh_frontier(&mut tree);
    Ok((tree, active))
}

/// Mutable per-run search state.
#[derive(Debug, Clone)]
pub struct CmetsState {
    pub tree: PartitionTree,
    pub active: ActiveSet,
    pub budget: BudgetState,
    pub schedule: CostSchedule,
}

impl CmetsState {
    pub fn new(domain: AxisBox, k: usize, max_depth: usize, budget: f64, schedule: CostSchedule) -> Result<Self> {
        let (tree, active) = init_tree(domain, k, max_depth)?;
        Ok(CmetsState {
            tree,
            active,
            budget: BudgetState::new(budget)?,
            schedule,
        })
    }

    /// Cost of the cheapest current candidate; an iteration only starts when
    /// the remaining budget covers it.
    pub fn min_candidate_cost(&self) -> Option<f64> {
        self.active
            .candidates()
            .iter()
            .map(|&id| self.schedule.cost(self.tree.node(id).depth))
            .min_by(f64::total_cmp)
    }
}

/// Outcome of one selection step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub selected: usize,
    pub depth: usize,
    pub center: Vec<f64>,
    pub cost: f64,
    pub noise_sd: f64,
    /// The unweighted score of the selected node.
    pub score: f64,
}

/// One selection step with externally supplied per-node scores. Selects the
/// candidate maximizing score / cost (ties broken by lowest id), updates the
/// leaf and frontier sets, and debits the budget.
///
/// Set update: selecting a frontier node commits its parent's split, so the
/// parent leaf is replaced by all of its children; selecting a leaf splits
/// that leaf. A leaf at max depth has no children and stays a leaf. The
/// frontier is then the children of all current leaves.
pub fn cmets_step_scored<F: FnMut(&TreeNode) -> f64>(
    state: &mut CmetsState,
    mut score_fn: F,
) -> Result<StepOutcome> {
    if !(state.budget.remaining > 0.0) {
        return Err(Error::invalid("budget exhausted before selection"));
    }
    let candidates = state.active.candidates();
    if candidates.is_empty() {
        return Err(Error::EmptyCandidateSet);
    }
    let mut best: Option<(usize, f64, f64)> = None;
    for &id in &candidates {
        let node = state.tree.node(id);
        let score = score_fn(node);
        let ratio = score / state.schedule.cost(node.depth);
        // strict > keeps the lowest id on ties (candidates are sorted)
        if best.map_or(true, |(_, _, b)| ratio > b) {
            best = Some((id, score, ratio));
        }
    }
    let (sel, score, _) = best.unwrap();
    let node = state.tree.node(sel).clone();

    if state.active.frontier.contains(&sel) {
        // commit the parent's split: all siblings become leaves
        let parent = node.parent.expect("frontier node has a parent");
        state.active.leaves.remove(&parent);
        for child in state.tree.ensure_children(parent) {
            state.active.leaves.insert(child);
        }
    } else {
        let children = state.tree.ensure_children(sel);
        if !children.is_empty() {
            state.active.leaves.remove(&sel);
            for child in children {
                state.active.leaves.insert(child);
            }
        }
        // at max depth the node stays a leaf and remains selectable
    }
    state.active.refresh_frontier(&mut state.tree);

    let cost = state.schedule.cost(node.depth);
    state.budget.debit(sel, cost);
    Ok(StepOutcome {
        selected: sel,
        depth: node.depth,
        center: node.center,
        cost,
        noise_sd: state.schedule.noise_sd(node.depth),
        score,
    })
}

/// One selection step scored by the cost-weighted information gain of the
/// aggregate posterior at each node center.
pub fn cmets_step(
    state: &mut CmetsState,
    post_g: &dyn PosteriorOverA,
    maxes: &MaxValueSamples,
) -> Result<StepOutcome> {
    cmets_step_scored(state, |node| {
        // observation noise widens with shallower nodes; score the noise-free
        // marginal (the cost ratio already penalizes depth)
        cmes_score_from_stats(post_g.mean(&node.center), post_g.sd(&node.center), maxes).score
    })
}

/// Why a budgeted run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    BudgetExhausted,
    CandidatesExhausted,
}

/// One record of a budgeted run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub node: usize,
    pub depth: usize,
    pub a: Vec<f64>,
    pub z: f64,
    pub cost: f64,
    pub cumulative_cost: f64,
    pub x_recommend: Vec<f64>,
    pub simple_regret: f64,
    pub instant_regret: f64,
}

/// Full trace of a budgeted run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    pub status: RunStatus,
    pub x_recommend: Vec<f64>,
    pub f_at_recommend: f64,
}

/// Tunables for a budgeted run.
#[derive(Debug, Clone)]
pub struct CmetsParams {
    pub budget: f64,
    pub max_depth: usize,
    pub schedule: CostSchedule,
    pub max_value_count: usize,
    pub max_value_method: crate::acquisition::MaxValueMethod,
    /// Grid over the input space for recommendations and max-value sampling.
    pub x_grid: Vec<Vec<f64>>,
    pub prior_mean: f64,
}

/// Budgeted run loop: select a node by cost-weighted information gain,
/// observe the environment at its resolution, refit the posterior on `f`,
/// recommend, and repeat until the budget runs out.
pub fn run_cmets(
    params: &CmetsParams,
    env: &crate::envs::Environment,
    cmo: &std::sync::Arc<crate::cmp::CmoCache>,
    seed: u64,
) -> Result<RunTrace> {
    use crate::acquisition::{recommend_x, sample_max_values};
    use crate::cmp::{aggregate_posterior, decondition, QueryLog};
    use rand::SeedableRng;

    let a_domain = env.a_domain();
    let dim = a_domain.dim();
    let mut state = CmetsState::new(
        a_domain,
        1usize << dim,
        params.max_depth,
        params.budget,
        params.schedule.clone(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = QueryLog::new();
    let (x_star, f_star) = env.optimum();
    let _ = x_star;

    let x_cache = cmo.x_grid_cache(&params.x_grid);
    let mut records = Vec::new();
    let mut status = RunStatus::BudgetExhausted;
    let mut best_f = f64::NEG_INFINITY;
    let mut best_g = f64::NEG_INFINITY;
    let mut t = 0usize;
    let mut x_rec = {
        let post = decondition(cmo, &log, params.prior_mean)?;
        params.x_grid[recommend_x(&post, &params.x_grid)?].clone()
    };

    loop {
        // an iteration starts only if the cheapest candidate is affordable
        match state.min_candidate_cost() {
            Some(c) if state.budget.remaining >= c => {}
            Some(_) => break,
            None => {
                status = RunStatus::CandidatesExhausted;
                break;
            }
        }
        t += 1;
        let post_f = decondition(cmo, &log, params.prior_mean)?;
        let post_g = aggregate_posterior(cmo, &log, params.prior_mean)?;
        let maxes = sample_max_values(
            &post_f,
            &params.x_grid,
            params.max_value_count,
            params.max_value_method,
            seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(t as u64),
        )?;
        let outcome = match cmets_step(&mut state, &post_g, &maxes) {
            Ok(o) => o,
            Err(Error::EmptyCandidateSet) => {
                status = RunStatus::CandidatesExhausted;
                break;
            }
            Err(e) => return Err(e),
        };
        let z = env.observe(&outcome.center, Some(outcome.depth), &mut rng)?;
        log.push(outcome.center.clone(), z, outcome.noise_sd * outcome.noise_sd)?;

        let post_f = decondition(cmo, &log, params.prior_mean)?;
        let (means, _) = post_f.mean_var_on_cache(&x_cache);
        let idx = crate::acquisition::argmax_tiebreak_low(&means);
        x_rec = params.x_grid[idx].clone();
        best_f = best_f.max(env.f(&x_rec)?);
        best_g = best_g.max(env.true_g(&outcome.center, Some(outcome.depth))?);
        records.push(TraceRecord {
            iteration: t,
            node: outcome.selected,
            depth: outcome.depth,
            a: outcome.center.clone(),
            z,
            cost: outcome.cost,
            cumulative_cost: state.budget.spent,
            x_recommend: x_rec.clone(),
            simple_regret: f_star - best_f,
            instant_regret: f_star - best_g,
        });
    }

    let f_at_recommend = env.f(&x_rec)?;
    Ok(RunTrace {
        records,
        status,
        x_recommend: x_rec,
        f_at_recommend,
    })
}
