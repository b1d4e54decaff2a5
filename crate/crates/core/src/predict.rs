//! Inference on raw functions: encode, decode with optional analyst
//! constraints, and map ids back to canonical types and names.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::names::UNK_NAME_ID;
use crate::corpus::raw::RawFunction;
use crate::corpus::{Encoder, ProcessedFunction, Vocabularies};
use crate::decoding::{constrained_decode, Constraint, Fixed, SearchOptions};
use crate::error::{Error, Result};
use crate::evaluation::{FunctionPredictions, PredictedVariable};
use crate::model::{Checkpoint, FunctionInput, Model, StepKind};
use crate::typelib::parse_canonical;

/// An analyst's choice for one variable, addressed by its position in the
/// input function's `variables`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableConstraint {
    pub variable: usize,
    #[serde(default, rename = "type", skip_serializing_if = "Option::is_none")]
    pub type_canonical: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictOptions {
    pub beam_width: usize,
    /// Candidates reported per variable.
    pub top_k: usize,
    /// Encoder input budget; capped at the model's own maximum.
    pub max_seq_length: Option<usize>,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            beam_width: 5,
            top_k: 5,
            max_seq_length: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabel {
    pub label: String,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateOut {
    #[serde(rename = "type")]
    pub type_canonical: Option<String>,
    pub name: Option<String>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableOut {
    pub index: usize,
    pub decompiler_name: String,
    pub layout_tokens: Vec<String>,
    /// Every occurrence fell beyond the input budget; nothing is predicted.
    pub truncated: bool,
    #[serde(rename = "type")]
    pub type_canonical: Option<String>,
    pub name: Option<String>,
    pub log_prob: Option<f64>,
    pub candidates: Vec<CandidateOut>,
    pub type_alternatives: Vec<ScoredLabel>,
    pub name_alternatives: Vec<ScoredLabel>,
    pub type_fixed: bool,
    pub name_fixed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionOut {
    pub binary_id: String,
    pub function_id: String,
    /// Set when the function body exceeded the input budget.
    pub truncation_warning: Option<String>,
    pub variables: Vec<VariableOut>,
}

impl FunctionOut {
    pub fn to_predictions(&self) -> FunctionPredictions {
        FunctionPredictions {
            binary_id: self.binary_id.clone(),
            function_id: self.function_id.clone(),
            variables: self
                .variables
                .iter()
                .map(|v| PredictedVariable {
                    index: v.index,
                    type_canonical: v.type_canonical.clone(),
                    name: v.name.clone(),
                })
                .collect(),
        }
    }
}

/// A trained model with the vocabularies it was trained against.
#[derive(Debug)]
pub struct Predictor {
    pub model: Model,
    pub vocab: Vocabularies,
}

impl Predictor {
    pub fn new(model: Model, vocab: Vocabularies) -> Self {
        Predictor { model, vocab }
    }

    /// Loads `checkpoint` and the dataset directory it was trained on.
    pub fn open(checkpoint: &Path, data_dir: &Path) -> Result<Self> {
        let model = Checkpoint::load(checkpoint, data_dir)?;
        let vocab = Vocabularies::load(data_dir)?;
        Ok(Predictor { model, vocab })
    }

    fn type_id(&self, s: &str) -> Result<usize> {
        let lib = &self.vocab.types;
        if let Some(id) = lib.id_of(s) {
            return Ok(id);
        }
        parse_canonical(s, &lib.scalar_table())
            .ok()
            .and_then(|e| lib.id_of(&e.canonical()))
            .ok_or_else(|| Error::Constraint(format!("type `{s}` is not in the type library")))
    }

    pub fn predict(&self, raw: &RawFunction, options: &PredictOptions) -> Result<FunctionOut> {
        self.refine(raw, &[], options)
    }

    /// Decodes `raw` with the given variables fixed. With no constraints this
    /// is exactly `predict`.
    pub fn refine(&self, raw: &RawFunction, constraints: &[VariableConstraint], options: &PredictOptions) -> Result<FunctionOut> {
        let max_seq = self.budget(options)?;
        let v = &self.vocab;
        let processed = Encoder::new(&v.subwords, &v.names, &v.types, max_seq).encode(raw)?;
        self.refine_processed(processed, constraints, options)
    }

    fn budget(&self, options: &PredictOptions) -> Result<usize> {
        let cap = self.model.config.max_seq_length;
        match options.max_seq_length.unwrap_or(cap).min(cap) {
            0 => Err(Error::Config("max_seq_length must be positive".into())),
            n => Ok(n),
        }
    }

    /// Same as [`Predictor::refine`] on an already encoded function.
    pub fn refine_processed(
        &self,
        mut processed: ProcessedFunction,
        constraints: &[VariableConstraint],
        options: &PredictOptions,
    ) -> Result<FunctionOut> {
        let cfg = &self.model.config;
        let v = &self.vocab;
        processed.truncate(self.budget(options)?);
        if processed.subword_ids.is_empty() {
            return Err(Error::InvalidFunction {
                function: processed.key(),
                message: "function has no tokens".into(),
            });
        }
        let input = FunctionInput::from_processed(&processed, &v.layouts, cfg.max_layout_len);

        let mut fixed = Constraint::default();
        let mut renames: Vec<(usize, String)> = Vec::new();
        for c in constraints {
            let rec = processed
                .variables
                .iter()
                .position(|r| r.index == c.variable)
                .ok_or_else(|| Error::Constraint(format!("variable {} does not exist", c.variable)))?;
            let var = input
                .vars
                .iter()
                .position(|vi| vi.record == rec)
                .ok_or_else(|| Error::Constraint(format!("variable {} is truncated and cannot be refined", c.variable)))?;
            let entry = fixed.0.entry(var).or_insert_with(Fixed::default);
            if let Some(t) = &c.type_canonical {
                entry.type_id = Some(self.type_id(t)?);
            }
            if let Some(n) = &c.name {
                // Out-of-vocabulary names steer the decoder as the unknown
                // name but are reported verbatim.
                entry.name_id = Some(v.names.id(n));
            }
            if let Some(n) = c.name.as_ref().filter(|n| v.names.id(n) == UNK_NAME_ID) {
                renames.push((var, n.clone()));
            }
        }

        let search = SearchOptions {
            beam_width: options.beam_width,
            alternatives: options.top_k.max(1),
        };
        let set = if input.vars.is_empty() {
            None
        } else {
            let session = self.model.session(&input)?;
            Some(constrained_decode(&session, |k| self.model.vocab_size(k), &fixed, search)?)
        };

        let type_name = |id: usize| v.types.canonical(id).map(String::from);
        let name_of = |id: usize| v.names.name(id).map(String::from);
        let mut out: Vec<VariableOut> = processed
            .variables
            .iter()
            .map(|r| VariableOut {
                index: r.index,
                decompiler_name: r.decompiler_name.clone(),
                layout_tokens: r.layout_tokens.clone(),
                truncated: r.truncated,
                type_canonical: None,
                name: None,
                log_prob: None,
                candidates: Vec::new(),
                type_alternatives: Vec::new(),
                name_alternatives: Vec::new(),
                type_fixed: false,
                name_fixed: false,
            })
            .collect();
        if let Some(set) = &set {
            let top1 = set.top1();
            let best = set.best().log_prob;
            for (var, vp) in set.variables.iter().enumerate() {
                let o = &mut out[input.vars[var].record];
                let (t, n) = top1[var];
                o.type_canonical = t.and_then(type_name);
                o.name = n.and_then(name_of);
                o.log_prob = Some(best);
                o.candidates = vp
                    .candidates
                    .iter()
                    .take(options.top_k)
                    .map(|c| CandidateOut {
                        type_canonical: c.type_id.and_then(type_name),
                        name: c.name_id.and_then(name_of),
                        log_prob: c.log_prob,
                    })
                    .collect();
                let scored = |alts: &[(usize, f64)], f: &dyn Fn(usize) -> Option<String>| {
                    alts.iter()
                        .filter_map(|&(l, lp)| Some(ScoredLabel { label: f(l)?, log_prob: lp }))
                        .collect()
                };
                o.type_alternatives = scored(&vp.type_alternatives, &type_name);
                o.name_alternatives = scored(&vp.name_alternatives, &name_of);
                o.type_fixed = vp.type_fixed;
                o.name_fixed = vp.name_fixed;
            }
            for (var, n) in renames {
                let o = &mut out[input.vars[var].record];
                o.name = Some(n.clone());
                for c in &mut o.candidates {
                    c.name = Some(n.clone());
                }
            }
        }
        let read = processed.subword_ids.len();
        let truncation_warning = (processed.full_length > read).then(|| {
            let dropped = out.iter().filter(|v| v.truncated).count();
            format!(
                "function body is {} subwords; only the first {read} were read and {dropped} variable(s) were not predicted",
                processed.full_length
            )
        });
        Ok(FunctionOut {
            binary_id: processed.binary_id.clone(),
            function_id: processed.function_id.clone(),
            truncation_warning,
            variables: out,
        })
    }

    pub fn predicts(&self, kind: StepKind) -> bool {
        self.model.plan(1).iter().any(|s| s.kind == kind)
    }
}
