//! Name and type match, partitioned accuracy, baselines and layout-signature
//! accuracy.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::encode::{ProcessedFunction, VariableRecord};
use crate::error::{Error, Result};
use crate::typelib::{parse_canonical, ScalarTable, TypeEntry, TypeLibrary, COMPONENT, UNKNOWN, UNKNOWN_ID};

pub fn name_match(pred: &str, gold: &str) -> bool {
    pred == gold
}

/// Canonical equality; the unknown sentinel never matches.
pub fn type_match(pred_type_id: usize, gold_canonical: &str, lib: &TypeLibrary) -> bool {
    pred_type_id != UNKNOWN_ID && lib.canonical(pred_type_id) == Some(gold_canonical)
}

fn canonical_match(pred: Option<&str>, gold: &str) -> bool {
    pred.is_some_and(|p| p != UNKNOWN && p == gold)
}

/// Top-1 labels for one variable, addressed by its position in the input
/// function.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictedVariable {
    pub index: usize,
    #[serde(default, rename = "type")]
    pub type_canonical: Option<String>,
    #[serde(default)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FunctionPredictions {
    pub binary_id: String,
    pub function_id: String,
    #[serde(default)]
    pub variables: Vec<PredictedVariable>,
}

impl FunctionPredictions {
    pub fn key(&self) -> String {
        format!("{}/{}", self.binary_id, self.function_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// Mean over functions of per-function accuracy.
    pub macro_avg: f64,
    /// Correct variables over all variables.
    pub micro: f64,
    pub correct: usize,
    pub variables: usize,
    pub functions: usize,
}

#[derive(Debug, Clone, Default)]
struct Tally {
    per_function: Vec<(usize, usize)>,
}

impl Tally {
    fn push(&mut self, correct: usize, total: usize) {
        if total > 0 {
            self.per_function.push((correct, total));
        }
    }

    fn finish(&self) -> Option<Accuracy> {
        if self.per_function.is_empty() {
            return None;
        }
        let correct: usize = self.per_function.iter().map(|p| p.0).sum();
        let variables: usize = self.per_function.iter().map(|p| p.1).sum();
        let functions = self.per_function.len();
        let macro_sum: f64 = self.per_function.iter().map(|&(c, t)| c as f64 / t as f64).sum();
        Some(Accuracy {
            macro_avg: macro_sum / functions as f64,
            micro: correct as f64 / variables as f64,
            correct,
            variables,
            functions,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionScores {
    pub types: Option<Accuracy>,
    pub names: Option<Accuracy>,
    pub layout_signature: Option<Accuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRow {
    pub gold: String,
    pub count: usize,
    /// Up to five most frequent predictions with counts.
    pub predicted: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryRow {
    pub binary_id: String,
    pub scores: PartitionScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Overall, function-in-training, function-not-in-training, struct.
    pub partitions: BTreeMap<String, PartitionScores>,
    pub confusion: Vec<ConfusionRow>,
    pub per_binary: Vec<BinaryRow>,
    /// Test functions without any prediction record; all their variables
    /// count as wrong.
    pub missing_functions: usize,
}

pub const OVERALL: &str = "overall";
pub const IN_TRAINING: &str = "function_in_training";
pub const NOT_IN_TRAINING: &str = "function_not_in_training";
pub const STRUCT: &str = "struct";
pub const PARTITIONS: [&str; 4] = [OVERALL, IN_TRAINING, NOT_IN_TRAINING, STRUCT];

/// Structural signature used for name-free matching. `<Component>` keeps its
/// own label so that exact matches are always signature matches.
fn signature(canonical: &str, size: u64, table: &ScalarTable) -> Option<String> {
    if canonical == COMPONENT {
        return Some(COMPONENT.to_string());
    }
    if canonical == UNKNOWN {
        return None;
    }
    let entry = parse_canonical(canonical, table).unwrap_or_else(|_| TypeEntry::typedef(canonical, size));
    entry.layout_signature().ok()
}

/// Fraction of variables whose predicted and gold types share a layout
/// signature.
pub fn layout_signature_accuracy(pairs: &[(Option<&str>, &str, u64)], lib: &TypeLibrary) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let table = lib.scalar_table();
    let hits = pairs.iter().filter(|(p, g, size)| signature_match(*p, g, *size, &table)).count();
    Some(hits as f64 / pairs.len() as f64)
}

fn signature_match(pred: Option<&str>, gold: &str, size: u64, table: &ScalarTable) -> bool {
    let Some(pred) = pred else { return false };
    match (signature(pred, size, table), signature(gold, size, table)) {
        (Some(a), Some(b)) => a == b,
        _ => false,
    }
}

struct Outcome {
    type_ok: Option<bool>,
    sig_ok: Option<bool>,
    name_ok: Option<bool>,
    is_struct: bool,
}

fn score_variable(v: &VariableRecord, pred: Option<&PredictedVariable>, table: &ScalarTable) -> Outcome {
    let usable = pred.filter(|_| !v.truncated);
    let pred_type = usable.and_then(|p| p.type_canonical.as_deref());
    let (type_ok, sig_ok) = match &v.gold_type {
        Some(gold) => (
            Some(canonical_match(pred_type, gold)),
            Some(signature_match(pred_type, gold, v.layout.size, table)),
        ),
        None => (None, None),
    };
    let name_ok = match (&v.gold_name, v.is_component()) {
        (Some(gold), false) => Some(usable.and_then(|p| p.name.as_deref()).is_some_and(|n| name_match(n, gold))),
        _ => None,
    };
    Outcome {
        type_ok,
        sig_ok,
        name_ok,
        is_struct: v.gold_struct,
    }
}

#[derive(Default)]
struct PartitionTally {
    types: Tally,
    names: Tally,
    sigs: Tally,
}

impl PartitionTally {
    fn push(&mut self, outcomes: &[&Outcome]) {
        let count = |f: fn(&Outcome) -> Option<bool>| {
            let vals: Vec<bool> = outcomes.iter().filter_map(|o| f(o)).collect();
            (vals.iter().filter(|b| **b).count(), vals.len())
        };
        let (c, t) = count(|o| o.type_ok);
        self.types.push(c, t);
        let (c, t) = count(|o| o.name_ok);
        self.names.push(c, t);
        let (c, t) = count(|o| o.sig_ok);
        self.sigs.push(c, t);
    }

    fn finish(&self) -> PartitionScores {
        PartitionScores {
            types: self.types.finish(),
            names: self.names.finish(),
            layout_signature: self.sigs.finish(),
        }
    }
}

/// Scores top-1 predictions against the gold labels of `test`.
pub fn partition_report(predictions: &[FunctionPredictions], test: &[ProcessedFunction], lib: &TypeLibrary) -> EvaluationReport {
    let table = lib.scalar_table();
    let by_key: HashMap<(&str, &str), &FunctionPredictions> = predictions
        .iter()
        .map(|p| ((p.binary_id.as_str(), p.function_id.as_str()), p))
        .collect();
    let mut parts: BTreeMap<&str, PartitionTally> = PARTITIONS.iter().map(|p| (*p, PartitionTally::default())).collect();
    let mut binaries: BTreeMap<&str, PartitionTally> = BTreeMap::new();
    let mut confusion: BTreeMap<&str, BTreeMap<String, usize>> = BTreeMap::new();
    let mut missing = 0;
    for f in test {
        let pred = by_key.get(&(f.binary_id.as_str(), f.function_id.as_str()));
        if pred.is_none() {
            missing += 1;
        }
        let pred_vars: HashMap<usize, &PredictedVariable> = pred
            .map(|p| p.variables.iter().map(|v| (v.index, v)).collect())
            .unwrap_or_default();
        let outcomes: Vec<Outcome> = f
            .variables
            .iter()
            .map(|v| score_variable(v, pred_vars.get(&v.index).copied(), &table))
            .collect();
        let all: Vec<&Outcome> = outcomes.iter().collect();
        parts.get_mut(OVERALL).expect("partition").push(&all);
        let side = if f.in_training == Some(true) { IN_TRAINING } else { NOT_IN_TRAINING };
        parts.get_mut(side).expect("partition").push(&all);
        let structs: Vec<&Outcome> = outcomes.iter().filter(|o| o.is_struct).collect();
        parts.get_mut(STRUCT).expect("partition").push(&structs);
        binaries.entry(f.binary_id.as_str()).or_default().push(&all);

        for v in &f.variables {
            if let Some(gold) = &v.gold_type {
                let predicted = pred_vars
                    .get(&v.index)
                    .filter(|_| !v.truncated)
                    .and_then(|p| p.type_canonical.clone())
                    .unwrap_or_else(|| "<none>".to_string());
                *confusion.entry(gold.as_str()).or_default().entry(predicted).or_default() += 1;
            }
        }
    }
    let mut rows: Vec<ConfusionRow> = confusion
        .into_iter()
        .map(|(gold, preds)| {
            let count = preds.values().sum();
            let mut predicted: Vec<(String, usize)> = preds.into_iter().collect();
            predicted.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            predicted.truncate(5);
            ConfusionRow {
                gold: gold.to_string(),
                count,
                predicted,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.gold.cmp(&b.gold)));
    EvaluationReport {
        partitions: parts.into_iter().map(|(k, v)| (k.to_string(), v.finish())).collect(),
        confusion: rows,
        per_binary: binaries
            .into_iter()
            .map(|(b, t)| BinaryRow {
                binary_id: b.to_string(),
                scores: t.finish(),
            })
            .collect(),
        missing_functions: missing,
    }
}

impl EvaluationReport {
    pub fn overall(&self) -> &PartitionScores {
        &self.partitions[OVERALL]
    }

    /// Fixed-width text table of the partition accuracies.
    pub fn to_table(&self) -> String {
        let cell = |a: &Option<Accuracy>| match a {
            Some(a) => format!("{:>6.1} {:>6.1} {:>6}", 100.0 * a.macro_avg, 100.0 * a.micro, a.variables),
            None => format!("{:>6} {:>6} {:>6}", "-", "-", 0),
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<26} | {:^20} | {:^20} | {:^20}",
            "partition", "type (macro micro n)", "name (macro micro n)", "layout (macro micro n)"
        );
        let _ = writeln!(out, "{}", "-".repeat(96));
        for p in PARTITIONS {
            let s = &self.partitions[p];
            let _ = writeln!(
                out,
                "{:<26} | {} | {} | {}",
                p,
                cell(&s.types),
                cell(&s.names),
                cell(&s.layout_signature)
            );
        }
        if self.missing_functions > 0 {
            let _ = writeln!(out, "functions without predictions: {}", self.missing_functions);
        }
        out
    }
}

fn modal(counts: &BTreeMap<usize, usize>) -> Option<usize> {
    counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(id, _)| *id)
}

fn gold_id(v: &VariableRecord) -> Option<usize> {
    v.gold_type_id.filter(|&id| id != UNKNOWN_ID && !v.is_component())
}

/// Most common training type per variable size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBySize {
    pub by_size: BTreeMap<u64, String>,
}

impl FrequencyBySize {
    pub fn predict(&self, size: u64) -> &str {
        self.by_size.get(&size).map(String::as_str).unwrap_or(UNKNOWN)
    }
}

pub fn baseline_frequency_by_size(train: &[ProcessedFunction], lib: &TypeLibrary) -> FrequencyBySize {
    let mut counts: BTreeMap<u64, BTreeMap<usize, usize>> = BTreeMap::new();
    for v in train.iter().flat_map(|f| &f.variables) {
        if let Some(id) = gold_id(v) {
            *counts.entry(v.layout.size).or_default().entry(id).or_default() += 1;
        }
    }
    FrequencyBySize {
        by_size: counts
            .into_iter()
            .filter_map(|(size, c)| Some((size, lib.canonical(modal(&c)?)?.to_string())))
            .collect(),
    }
}

/// Most common developer type per decompiler type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompilerRemap {
    pub by_decompiler_type: BTreeMap<String, String>,
}

impl DecompilerRemap {
    /// Unseen decompiler types pass through unchanged.
    pub fn predict<'a>(&'a self, decompiler_type: &'a str) -> &'a str {
        self.by_decompiler_type
            .get(decompiler_type)
            .map(String::as_str)
            .unwrap_or(decompiler_type)
    }
}

pub fn baseline_decompiler_remap(train: &[ProcessedFunction], lib: &TypeLibrary) -> Result<DecompilerRemap> {
    let mut counts: BTreeMap<&str, BTreeMap<usize, usize>> = BTreeMap::new();
    for v in train.iter().flat_map(|f| &f.variables) {
        let dt = v.decompiler_type.as_deref().ok_or(Error::MissingField {
            field: "decompiler_type",
        })?;
        if let Some(id) = gold_id(v) {
            *counts.entry(dt).or_default().entry(id).or_default() += 1;
        }
    }
    Ok(DecompilerRemap {
        by_decompiler_type: counts
            .into_iter()
            .filter_map(|(dt, c)| Some((dt.to_string(), lib.canonical(modal(&c)?)?.to_string())))
            .collect(),
    })
}

/// Applies a per-variable type rule to every function of `test`.
pub fn baseline_predictions(
    test: &[ProcessedFunction],
    mut rule: impl FnMut(&VariableRecord) -> Result<String>,
) -> Result<Vec<FunctionPredictions>> {
    test.iter()
        .map(|f| {
            Ok(FunctionPredictions {
                binary_id: f.binary_id.clone(),
                function_id: f.function_id.clone(),
                variables: f
                    .variables
                    .iter()
                    .map(|v| {
                        Ok(PredictedVariable {
                            index: v.index,
                            type_canonical: Some(rule(v)?),
                            name: None,
                        })
                    })
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

pub fn frequency_by_size_predictions(test: &[ProcessedFunction], b: &FrequencyBySize) -> Vec<FunctionPredictions> {
    baseline_predictions(test, |v| Ok(b.predict(v.layout.size).to_string())).expect("rule is infallible")
}

pub fn decompiler_remap_predictions(test: &[ProcessedFunction], b: &DecompilerRemap) -> Result<Vec<FunctionPredictions>> {
    baseline_predictions(test, |v| {
        let dt = v.decompiler_type.as_deref().ok_or(Error::MissingField {
            field: "decompiler_type",
        })?;
        Ok(b.predict(dt).to_string())
    })
}
