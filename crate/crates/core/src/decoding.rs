//! Greedy, beam and constrained search over a step plan.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSession, Step, StepKind};

/// Anything that yields next-step log-probabilities for a label prefix.
pub trait StepScorer {
    fn plan(&self) -> &[Step];
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl StepScorer for ModelSession<'_> {
    fn plan(&self) -> &[Step] {
        &self.plan
    }

    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.step_log_probs(prefix)
    }
}

/// Caches scorer calls by prefix so repeated searches share work.
pub struct Memo<'s, S: StepScorer + ?Sized> {
    inner: &'s S,
    cache: RefCell<HashMap<Vec<usize>, Rc<Vec<f64>>>>,
}

impl<'s, S: StepScorer + ?Sized> Memo<'s, S> {
    pub fn new(inner: &'s S) -> Self {
        Memo {
            inner,
            cache: RefCell::new(HashMap::new()),
        }
    }

    fn get(&self, prefix: &[usize]) -> Result<Rc<Vec<f64>>> {
        if let Some(hit) = self.cache.borrow().get(prefix) {
            return Ok(hit.clone());
        }
        let lp = Rc::new(self.inner.log_probs(prefix)?);
        self.cache.borrow_mut().insert(prefix.to_vec(), lp.clone());
        Ok(lp)
    }
}

/// Fixed labels for one variable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixed {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub type_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name_id: Option<usize>,
}

/// Analyst choices keyed by variable position in the plan.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Constraint(pub BTreeMap<usize, Fixed>);

impl Constraint {
    pub fn is_empty(&self) -> bool {
        self.0.values().all(|f| f.type_id.is_none() && f.name_id.is_none())
    }

    /// Forced label per step; errors on unknown variables, out-of-range ids
    /// or kinds the plan never predicts.
    pub fn per_step(&self, plan: &[Step], vocab: impl Fn(StepKind) -> usize) -> Result<Vec<Option<usize>>> {
        let m = plan.iter().map(|s| s.var + 1).max().unwrap_or(0);
        let mut forced = vec![None; plan.len()];
        for (&var, fixed) in &self.0 {
            if var >= m {
                return Err(Error::Constraint(format!("variable {var} does not exist (function has {m})")));
            }
            for (kind, label) in [(StepKind::Type, fixed.type_id), (StepKind::Name, fixed.name_id)] {
                let Some(label) = label else { continue };
                if label >= vocab(kind) {
                    return Err(Error::Constraint(format!("{kind:?} id {label} for variable {var} is out of range")));
                }
                let pos = plan
                    .iter()
                    .position(|s| s.var == var && s.kind == kind)
                    .ok_or_else(|| Error::Constraint(format!("the model does not predict {kind:?} labels")))?;
                forced[pos] = Some(label);
            }
        }
        Ok(forced)
    }
}

/// One complete label sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub labels: Vec<usize>,
    /// Sum of per-step log-probabilities over unforced steps.
    pub log_prob: f64,
    /// Per-step contribution; 0 on forced steps.
    pub step_log_probs: Vec<f64>,
}

/// Descending score, then lexicographically smallest labels.
fn rank(a: &Sequence, b: &Sequence) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.labels.cmp(&b.labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub type_id: Option<usize>,
    pub name_id: Option<usize>,
    /// Log-probability of the best sequence that makes this choice.
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariablePrediction {
    pub var: usize,
    pub candidates: Vec<Candidate>,
    /// Next-step alternatives at this variable's type step along the best
    /// sequence, as `(label, log-prob)`.
    pub type_alternatives: Vec<(usize, f64)>,
    pub name_alternatives: Vec<(usize, f64)>,
    pub type_fixed: bool,
    pub name_fixed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub plan: Vec<Step>,
    /// Best first.
    pub sequences: Vec<Sequence>,
    pub variables: Vec<VariablePrediction>,
}

impl PredictionSet {
    pub fn best(&self) -> &Sequence {
        &self.sequences[0]
    }

    /// Top-1 type and name per variable.
    pub fn top1(&self) -> Vec<(Option<usize>, Option<usize>)> {
        let m = self.variables.len();
        let mut out = vec![(None, None); m];
        for (s, &l) in self.plan.iter().zip(&self.best().labels) {
            match s.kind {
                StepKind::Type => out[s.var].0 = Some(l),
                StepKind::Name => out[s.var].1 = Some(l),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub beam_width: usize,
    /// Alternatives kept per step along the best sequence.
    pub alternatives: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            beam_width: 5,
            alternatives: 5,
        }
    }
}

fn search_space(scorer: &impl StepScorer, forced: &[Option<usize>], vocab: &dyn Fn(StepKind) -> usize) -> f64 {
    scorer
        .plan()
        .iter()
        .zip(forced)
        .map(|(s, f)| if f.is_some() { 1.0 } else { vocab(s.kind) as f64 })
        .product()
}

/// A single left-to-right beam pass of fixed width.
fn beam_pass<S: StepScorer + ?Sized>(memo: &Memo<S>, forced: &[Option<usize>], width: usize) -> Result<Vec<Sequence>> {
    let mut beams = vec![Sequence {
        labels: Vec::new(),
        log_prob: 0.0,
        step_log_probs: Vec::new(),
    }];
    for f in forced {
        let mut next = Vec::new();
        for b in &beams {
            let mut extend = |label: usize, lp: f64| {
                let mut s = b.clone();
                s.labels.push(label);
                s.log_prob += lp;
                s.step_log_probs.push(lp);
                next.push(s);
            };
            match f {
                Some(label) => extend(*label, 0.0),
                None => {
                    let lp = memo.get(&b.labels)?;
                    for (label, &p) in lp.iter().enumerate() {
                        extend(label, p);
                    }
                }
            }
        }
        next.sort_by(rank);
        next.truncate(width);
        beams = next;
    }
    Ok(beams)
}

/// Best-first search at `width`. The result is the union of passes at
/// every width up to `width`, so the best score never drops as the width
/// grows; a width that covers the whole space runs a single exhaustive pass.
fn widened<S: StepScorer + ?Sized>(
    memo: &Memo<S>,
    forced: &[Option<usize>],
    width: usize,
    space: f64,
) -> Result<Vec<Sequence>> {
    if width as f64 >= space {
        return beam_pass(memo, forced, width);
    }
    let mut pool: Vec<Sequence> = Vec::new();
    for w in 1..=width {
        for s in beam_pass(memo, forced, w)? {
            if !pool.iter().any(|p| p.labels == s.labels) {
                pool.push(s);
            }
        }
    }
    pool.sort_by(rank);
    pool.truncate(width);
    Ok(pool)
}

/// Argmax at every step, ties to the smallest label.
pub fn greedy_decode(scorer: &impl StepScorer) -> Result<Sequence> {
    let forced = vec![None; scorer.plan().len()];
    greedy_with(&Memo::new(scorer), &forced)
}

fn greedy_with<S: StepScorer + ?Sized>(memo: &Memo<S>, forced: &[Option<usize>]) -> Result<Sequence> {
    let mut s = Sequence {
        labels: Vec::new(),
        log_prob: 0.0,
        step_log_probs: Vec::new(),
    };
    for f in forced {
        let (label, lp) = match f {
            Some(l) => (*l, 0.0),
            None => {
                let lp = memo.get(&s.labels)?;
                let mut best = 0;
                for l in 1..lp.len() {
                    if (s.log_prob + lp[l]) > (s.log_prob + lp[best]) {
                        best = l;
                    }
                }
                (best, lp[best])
            }
        };
        s.labels.push(label);
        s.log_prob += lp;
        s.step_log_probs.push(lp);
    }
    Ok(s)
}

/// The `beam_width` best sequences found by beam search.
pub fn beam_decode(scorer: &impl StepScorer, vocab: impl Fn(StepKind) -> usize, beam_width: usize) -> Result<Vec<Sequence>> {
    let forced = vec![None; scorer.plan().len()];
    beam_with(&Memo::new(scorer), &forced, &vocab, beam_width)
}

fn beam_with<S: StepScorer>(
    memo: &Memo<S>,
    forced: &[Option<usize>],
    vocab: &dyn Fn(StepKind) -> usize,
    beam_width: usize,
) -> Result<Vec<Sequence>> {
    if beam_width < 1 {
        return Err(Error::Decode("beam width must be at least 1".into()));
    }
    if beam_width == 1 {
        return Ok(vec![greedy_with(memo, forced)?]);
    }
    let space = search_space(memo.inner, forced, vocab);
    widened(memo, forced, beam_width, space)
}

/// Beam search with analyst-fixed labels, packaged per variable.
pub fn constrained_decode<S: StepScorer>(
    scorer: &S,
    vocab: impl Fn(StepKind) -> usize,
    constraints: &Constraint,
    options: SearchOptions,
) -> Result<PredictionSet> {
    let plan = scorer.plan().to_vec();
    let forced = constraints.per_step(&plan, &vocab)?;
    let memo = Memo::new(scorer);
    let sequences = beam_with(&memo, &forced, &vocab, options.beam_width)?;
    let m = plan.iter().map(|s| s.var + 1).max().unwrap_or(0);
    let best = &sequences[0];
    let mut variables: Vec<VariablePrediction> = (0..m)
        .map(|var| VariablePrediction {
            var,
            candidates: Vec::new(),
            type_alternatives: Vec::new(),
            name_alternatives: Vec::new(),
            type_fixed: false,
            name_fixed: false,
        })
        .collect();
    for (k, step) in plan.iter().enumerate() {
        let vp = &mut variables[step.var];
        let alts = if forced[k].is_some() {
            vec![(best.labels[k], 0.0)]
        } else {
            let lp = memo.get(&best.labels[..k])?;
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            order.into_iter().take(options.alternatives.max(1)).map(|l| (l, lp[l])).collect()
        };
        match step.kind {
            StepKind::Type => {
                vp.type_alternatives = alts;
                vp.type_fixed = forced[k].is_some();
            }
            StepKind::Name => {
                vp.name_alternatives = alts;
                vp.name_fixed = forced[k].is_some();
            }
        }
    }
    for seq in &sequences {
        let mut per_var: Vec<(Option<usize>, Option<usize>)> = vec![(None, None); m];
        for (s, &l) in plan.iter().zip(&seq.labels) {
            match s.kind {
                StepKind::Type => per_var[s.var].0 = Some(l),
                StepKind::Name => per_var[s.var].1 = Some(l),
            }
        }
        for (var, (t, n)) in per_var.into_iter().enumerate() {
            let cands = &mut variables[var].candidates;
            if !cands.iter().any(|c| c.type_id == t && c.name_id == n) {
                cands.push(Candidate {
                    type_id: t,
                    name_id: n,
                    log_prob: seq.log_prob,
                });
            }
        }
    }
    Ok(PredictionSet {
        plan,
        sequences,
        variables,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::log_softmax;
    use crate::model::{multitask_schedule, Tasks};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Conditional tables addressed by a hash of the prefix.
    struct Table {
        plan: Vec<Step>,
        sizes: [usize; 2],
        seed: u64,
    }

    impl StepScorer for Table {
        fn plan(&self) -> &[Step] {
            &self.plan
        }

        fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
            let mut h = self.seed;
            for &p in prefix {
                h = h.wrapping_mul(6364136223846793005).wrapping_add(p as u64 + 1);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            let n = self.sizes[self.plan[prefix.len()].kind.index()];
            let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            Ok(log_softmax(&logits))
        }
    }

    fn exhaustive(t: &Table) -> Sequence {
        let mut best: Option<Sequence> = None;
        let mut stack = vec![(Vec::new(), 0.0)];
        while let Some((labels, lp)) = stack.pop() {
            if labels.len() == t.plan.len() {
                let s = Sequence {
                    labels,
                    log_prob: lp,
                    step_log_probs: vec![],
                };
                if best.as_ref().is_none_or(|b| rank(&s, b) == Ordering::Less) {
                    best = Some(s);
                }
                continue;
            }
            let dist = t.log_probs(&labels).unwrap();
            for (l, p) in dist.iter().enumerate() {
                let mut next = labels.clone();
                next.push(l);
                stack.push((next, lp + p));
            }
        }
        best.unwrap()
    }

    fn table(seed: u64, m: usize, types: usize, names: usize) -> Table {
        Table {
            plan: multitask_schedule(m, Tasks::Both),
            sizes: [types, names],
            seed,
        }
    }

    #[test]
    fn greedy_picks_argmax() {
        struct Fixed2;
        impl StepScorer for Fixed2 {
            fn plan(&self) -> &[Step] {
                const P: [Step; 1] = [Step {
                    var: 0,
                    kind: StepKind::Type,
                }];
                &P
            }
            fn log_probs(&self, _: &[usize]) -> Result<Vec<f64>> {
                Ok(vec![0.9f64.ln(), 0.1f64.ln()])
            }
        }
        let s = greedy_decode(&Fixed2).unwrap();
        assert_eq!(s.labels, [0]);
        assert_eq!(s.log_prob, 0.9f64.ln());
    }

    #[test]
    fn full_width_beam_matches_exhaustive_search() {
        for seed in 0..30 {
            let t = table(seed, 2, 3, 2);
            let vocab = |k: StepKind| t.sizes[k.index()];
            let top = beam_decode(&t, vocab, 36).unwrap();
            let ex = exhaustive(&t);
            assert_eq!(top[0].labels, ex.labels);
            assert!((top[0].log_prob - ex.log_prob).abs() < 1e-12);
            assert_eq!(top.len(), 36);
            assert!(top.windows(2).all(|w| rank(&w[0], &w[1]) != Ordering::Greater));
        }
    }

    #[test]
    fn width_one_is_greedy_and_scores_are_monotone() {
        for seed in 0..30 {
            let t = table(seed, 3, 4, 3);
            let vocab = |k: StepKind| t.sizes[k.index()];
            let g = greedy_decode(&t).unwrap();
            let b1 = beam_decode(&t, vocab, 1).unwrap();
            assert_eq!(b1, vec![g.clone()]);
            let total: f64 = g.step_log_probs.iter().sum();
            assert_eq!(total.to_bits(), g.log_prob.to_bits());
            let mut prev = f64::NEG_INFINITY;
            for w in 1..12 {
                let best = beam_decode(&t, vocab, w).unwrap()[0].log_prob;
                assert!(best >= prev, "seed {seed} width {w}: {best} < {prev}");
                prev = best;
            }
        }
    }

    #[test]
    fn constraints_force_labels_and_drop_their_mass() {
        let t = table(7, 2, 4, 3);
        let vocab = |k: StepKind| t.sizes[k.index()];
        let free = constrained_decode(&t, vocab, &Constraint::default(), SearchOptions::default()).unwrap();
        assert_eq!(free.sequences, beam_decode(&t, vocab, 5).unwrap());

        let top_type = free.best().labels[0];
        let same = Constraint(BTreeMap::from([(0, Fixed { type_id: Some(top_type), name_id: None })]));
        let pinned = constrained_decode(&t, vocab, &same, SearchOptions::default()).unwrap();
        assert_eq!(pinned.best().labels, free.best().labels);
        assert_eq!(pinned.best().step_log_probs[0], 0.0);
        assert!(pinned.variables[0].type_fixed);

        let other = (top_type + 1) % 4;
        let c = Constraint(BTreeMap::from([(0, Fixed { type_id: Some(other), name_id: Some(2) })]));
        let p = constrained_decode(&t, vocab, &c, SearchOptions::default()).unwrap();
        for s in &p.sequences {
            assert_eq!(s.labels[0], other);
            assert_eq!(s.labels[1], 2);
            let free_steps: f64 = s.step_log_probs[2..].iter().sum();
            assert!((s.log_prob - free_steps).abs() < 1e-12);
        }

        let bad = Constraint(BTreeMap::from([(5, Fixed { type_id: Some(0), name_id: None })]));
        assert!(constrained_decode(&t, vocab, &bad, SearchOptions::default()).is_err());
        let bad_id = Constraint(BTreeMap::from([(0, Fixed { type_id: Some(9), name_id: None })]));
        assert!(constrained_decode(&t, vocab, &bad_id, SearchOptions::default()).is_err());
    }

    #[test]
    fn prediction_set_is_sorted_and_non_positive() {
        let t = table(3, 3, 5, 4);
        let vocab = |k: StepKind| t.sizes[k.index()];
        let p = constrained_decode(&t, vocab, &Constraint::default(), SearchOptions::default()).unwrap();
        for v in &p.variables {
            assert!(!v.candidates.is_empty() && v.candidates.len() <= 5);
            assert!(v.candidates.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
            assert!(v.candidates.iter().all(|c| c.log_prob <= 0.0));
            assert_eq!(v.type_alternatives.len(), 5);
        }
        let top = p.top1();
        assert_eq!(top[0].0, Some(p.best().labels[0]));
    }

    #[test]
    fn empty_plan_yields_one_empty_sequence() {
        let t = table(1, 0, 3, 3);
        let p = constrained_decode(&t, |_| 3, &Constraint::default(), SearchOptions::default()).unwrap();
        assert_eq!(p.sequences.len(), 1);
        assert!(p.variables.is_empty());
    }
}
