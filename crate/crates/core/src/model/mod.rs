//! Code encoder, layout encoder, interleaved decoder and output heads.

pub mod checkpoint;
mod config;
mod layers;

use std::collections::HashMap;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{init_normal, log_softmax, softmax, Graph, ParamId, ParamStore, Var};
use crate::corpus::encode::ProcessedFunction;
use crate::corpus::layout::LayoutVocab;
use crate::corpus::names::{NO_NAME_ID, UNK_NAME_ID};
use crate::error::{Error, Result};
use crate::typelib::UNKNOWN_ID;

pub use checkpoint::Checkpoint;
pub use config::{multitask_schedule, ModelConfig, Step, StepKind, Tasks};
use layers::Stack;

const EMBED_STD: f64 = 0.1;

/// One variable as the model sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct VarInput {
    /// Index into `ProcessedFunction::variables`.
    pub record: usize,
    pub occurrences: Vec<usize>,
    pub layout_ids: Vec<usize>,
    pub gold_type: Option<usize>,
    pub gold_name: Option<usize>,
    pub component: bool,
}

/// Model-ready view of a function: only variables that survived truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionInput {
    pub subword_ids: Vec<usize>,
    pub vars: Vec<VarInput>,
}

impl FunctionInput {
    pub fn from_processed(f: &ProcessedFunction, layouts: &LayoutVocab, max_layout_len: usize) -> Self {
        let vars = f
            .variables
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.truncated)
            .map(|(record, v)| VarInput {
                record,
                occurrences: v.occurrences.clone(),
                layout_ids: layouts.encode(&v.layout_tokens, max_layout_len),
                gold_type: v.gold_type_id,
                gold_name: v.gold_name_id,
                component: v.is_component(),
            })
            .collect();
        FunctionInput {
            subword_ids: f.subword_ids.iter().map(|&i| i as usize).collect(),
            vars,
        }
    }

    /// Gold label per step of `plan`; missing labels fall back to a sentinel.
    pub fn gold_labels(&self, plan: &[Step]) -> Vec<usize> {
        plan.iter()
            .map(|s| {
                let v = &self.vars[s.var];
                match s.kind {
                    StepKind::Type => v.gold_type.unwrap_or(UNKNOWN_ID),
                    StepKind::Name if v.component => NO_NAME_ID,
                    StepKind::Name => v.gold_name.unwrap_or(UNK_NAME_ID),
                }
            })
            .collect()
    }

    /// Whether step `s` contributes to the training loss.
    pub fn step_in_loss(&self, s: &Step) -> bool {
        let v = &self.vars[s.var];
        match s.kind {
            StepKind::Type => v.gold_type.is_some(),
            StepKind::Name => !v.component && v.gold_name.is_some_and(|n| n != UNK_NAME_ID),
        }
    }
}

#[derive(Debug, Clone)]
struct Ids {
    code_tok: ParamId,
    code_pos: ParamId,
    encoder: Stack,
    layout_tok: ParamId,
    layout_pos: ParamId,
    layout: Stack,
    bos: ParamId,
    type_emb: ParamId,
    name_emb: ParamId,
    kind_emb: ParamId,
    dec_pos: ParamId,
    decoder: Stack,
    type_w: ParamId,
    type_b: ParamId,
    mask_w: ParamId,
    name_w: ParamId,
    name_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (d, dl) = (c.d_model, c.layout_d_model);
        let code_tok = s.add("code.tok", init_normal(&mut rng, c.subword_vocab_size, d, EMBED_STD));
        let code_pos = s.add("code.pos", init_normal(&mut rng, c.max_seq_length, d, EMBED_STD));
        let encoder = Stack::new(&mut s, &mut rng, "code", c.n_enc_layers, d, c.n_heads, false, c.dropout);
        let layout_tok = s.add("layout.tok", init_normal(&mut rng, c.layout_vocab_size, dl, EMBED_STD));
        let layout_pos = s.add("layout.pos", init_normal(&mut rng, c.max_layout_len, dl, EMBED_STD));
        let layout = Stack::new(&mut s, &mut rng, "layout", c.n_layout_layers, dl, c.n_heads, false, c.dropout);
        let bos = s.add("dec.bos", init_normal(&mut rng, 1, d, EMBED_STD));
        let type_emb = s.add("dec.type_emb", init_normal(&mut rng, c.type_vocab_size, d, EMBED_STD));
        let name_emb = s.add("dec.name_emb", init_normal(&mut rng, c.name_vocab_size, d, EMBED_STD));
        let kind_emb = s.add("dec.kind", init_normal(&mut rng, 2, d, EMBED_STD));
        let dec_pos = s.add("dec.pos", init_normal(&mut rng, c.max_steps(), d, EMBED_STD));
        let decoder = Stack::new(&mut s, &mut rng, "dec", c.n_dec_layers, d, c.n_heads, true, c.dropout);
        let out_std = 1.0 / (d as f64).sqrt();
        let type_w = s.add("out.type.w", init_normal(&mut rng, c.type_vocab_size, d, out_std));
        let type_b = s.add("out.type.b", Array2::zeros((1, c.type_vocab_size)));
        let mask_w = s.add("out.mask.w", init_normal(&mut rng, c.type_vocab_size, dl, 1.0 / (dl as f64).sqrt()));
        let name_w = s.add("out.name.w", init_normal(&mut rng, c.name_vocab_size, d, out_std));
        let name_b = s.add("out.name.b", Array2::zeros((1, c.name_vocab_size)));
        Ok(Model {
            ids: Ids {
                code_tok,
                code_pos,
                encoder,
                layout_tok,
                layout_pos,
                layout,
                bos,
                type_emb,
                name_emb,
                kind_emb,
                dec_pos,
                decoder,
                type_w,
                type_b,
                mask_w,
                name_w,
                name_b,
            },
            config,
            params: s,
        })
    }

    pub fn plan(&self, m: usize) -> Vec<Step> {
        multitask_schedule(m, self.config.tasks)
    }

    pub fn mask_weight(&self) -> ParamId {
        self.ids.mask_w
    }

    pub fn vocab_size(&self, kind: StepKind) -> usize {
        match kind {
            StepKind::Type => self.config.type_vocab_size,
            StepKind::Name => self.config.name_vocab_size,
        }
    }

    // ---- graph-level building blocks ----

    pub fn g_encode_code(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let c = &self.config;
        if ids.is_empty() {
            return Err(Error::Model("empty token sequence".into()));
        }
        if ids.len() > c.max_seq_length {
            return Err(Error::Model(format!(
                "input of {} tokens exceeds max_seq_length {}",
                ids.len(),
                c.max_seq_length
            )));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= c.subword_vocab_size) {
            return Err(Error::Model(format!("subword id {bad} outside vocabulary")));
        }
        let tok = g.embed(self.ids.code_tok, ids);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.embed(self.ids.code_pos, &positions);
        let x = g.add(tok, pos);
        let x = g.dropout(x, c.dropout);
        Ok(self.ids.encoder.forward(g, x, None, false))
    }

    /// Mean-pooled layout representation, `1 x layout_d_model`.
    pub fn g_encode_layout(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let c = &self.config;
        let ids = &ids[..ids.len().min(c.max_layout_len)];
        if ids.is_empty() {
            return Err(Error::Model("empty layout sequence".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= c.layout_vocab_size) {
            return Err(Error::Model(format!("layout id {bad} outside vocabulary")));
        }
        let tok = g.embed(self.ids.layout_tok, ids);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.embed(self.ids.layout_pos, &positions);
        let x = g.add(tok, pos);
        let x = g.dropout(x, c.dropout);
        let h = self.ids.layout.forward(g, x, None, false);
        Ok(g.mean_all_rows(h))
    }

    /// Stacked pooled variable encodings, `m x d_model`.
    pub fn g_variables(&self, g: &mut Graph, h: Var, vars: &[VarInput]) -> Result<Var> {
        let n = g.value(h).nrows();
        let mut rows = Vec::with_capacity(vars.len());
        for (i, v) in vars.iter().enumerate() {
            if v.occurrences.is_empty() {
                return Err(Error::Model(format!("variable {i} has no occurrences")));
            }
            if let Some(bad) = v.occurrences.iter().find(|&&o| o >= n) {
                return Err(Error::Model(format!("variable {i} occurrence {bad} beyond {n} tokens")));
            }
            rows.push((g.mean_rows(h, &v.occurrences), 0));
        }
        Ok(g.rows(&rows))
    }

    /// Layout vectors, `m x layout_d_model`; identical layouts are encoded once.
    pub fn g_layouts(&self, g: &mut Graph, vars: &[VarInput]) -> Result<Var> {
        let mut cache: HashMap<&[usize], Var> = HashMap::new();
        let mut rows = Vec::with_capacity(vars.len());
        for v in vars {
            let m = match cache.get(v.layout_ids.as_slice()) {
                Some(&m) => m,
                None => {
                    let m = self.g_encode_layout(g, &v.layout_ids)?;
                    cache.insert(&v.layout_ids, m);
                    m
                }
            };
            rows.push((m, 0));
        }
        Ok(g.rows(&rows))
    }

    /// Decoder states for `steps`; step `s` is fed the label of step `s-1`
    /// from `history`.
    pub fn g_decode(&self, g: &mut Graph, h: Var, v: Var, steps: &[Step], history: &[usize]) -> Result<Var> {
        let c = &self.config;
        let n = steps.len();
        if n == 0 || n > c.max_steps() {
            return Err(Error::Model(format!("decoder length {n} outside 1..={}", c.max_steps())));
        }
        if history.len() + 1 < n {
            return Err(Error::Model(format!("history of {} labels for {n} steps", history.len())));
        }
        let m = g.value(v).nrows();
        let mut type_ids = Vec::new();
        let mut name_ids = Vec::new();
        let mut slots = Vec::with_capacity(n);
        slots.push(None);
        for (s, &label) in steps[..n - 1].iter().zip(history) {
            let (list, size) = match s.kind {
                StepKind::Type => (&mut type_ids, c.type_vocab_size),
                StepKind::Name => (&mut name_ids, c.name_vocab_size),
            };
            if label >= size {
                return Err(Error::Model(format!("label {label} outside the {:?} vocabulary", s.kind)));
            }
            slots.push(Some((s.kind, list.len())));
            list.push(label);
        }
        let bos = g.param(self.ids.bos);
        let types = (!type_ids.is_empty()).then(|| g.embed(self.ids.type_emb, &type_ids));
        let names = (!name_ids.is_empty()).then(|| g.embed(self.ids.name_emb, &name_ids));
        let prev_rows: Vec<(Var, usize)> = slots
            .iter()
            .map(|slot| match slot {
                None => (bos, 0),
                Some((StepKind::Type, i)) => (types.expect("type rows"), *i),
                Some((StepKind::Name, i)) => (names.expect("name rows"), *i),
            })
            .collect();
        let prev = g.rows(&prev_rows);
        let kinds: Vec<usize> = steps.iter().map(|s| s.kind.index()).collect();
        let kind = g.embed(self.ids.kind_emb, &kinds);
        let var_idx: Vec<usize> = steps.iter().map(|s| s.var).collect();
        if let Some(bad) = var_idx.iter().find(|&&i| i >= m) {
            return Err(Error::Model(format!("step refers to variable {bad} of {m}")));
        }
        let vs = g.gather(v, &var_idx);
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.embed(self.ids.dec_pos, &positions);
        let x = g.add(prev, kind);
        let x = g.add(x, vs);
        let x = g.add(x, pos);
        let x = g.dropout(x, c.dropout);
        Ok(self.ids.decoder.forward(g, x, Some(h), true))
    }

    /// Type logits `Z W^T + b`, plus `M W_m^T` when `mask` is given.
    pub fn g_type_logits(&self, g: &mut Graph, z: Var, mask: Option<Var>) -> Var {
        let w = g.param(self.ids.type_w);
        let b = g.param(self.ids.type_b);
        let s = g.matmul_bt(z, w);
        let s = g.add_row(s, b);
        match mask {
            Some(m) => {
                let wm = g.param(self.ids.mask_w);
                let delta = g.matmul_bt(m, wm);
                g.add(s, delta)
            }
            None => s,
        }
    }

    pub fn g_name_logits(&self, g: &mut Graph, z: Var) -> Var {
        let w = g.param(self.ids.name_w);
        let b = g.param(self.ids.name_b);
        let s = g.matmul_bt(z, w);
        g.add_row(s, b)
    }

    /// Summed teacher-forced NLL over the included steps of one function and
    /// the number of those steps; `None` when nothing is included.
    pub fn loss_sum(&self, g: &mut Graph, f: &FunctionInput) -> Result<Option<(Var, usize)>> {
        if f.vars.is_empty() {
            return Ok(None);
        }
        let plan = self.plan(f.vars.len());
        let included: Vec<usize> = (0..plan.len()).filter(|&i| f.step_in_loss(&plan[i])).collect();
        if included.is_empty() {
            return Ok(None);
        }
        let labels = f.gold_labels(&plan);
        let h = self.g_encode_code(g, &f.subword_ids)?;
        let v = self.g_variables(g, h, &f.vars)?;
        let z = self.g_decode(g, h, v, &plan, &labels)?;
        let mut parts = Vec::new();
        let type_steps: Vec<usize> = included.iter().copied().filter(|&i| plan[i].kind == StepKind::Type).collect();
        if !type_steps.is_empty() {
            let rows: Vec<(Var, usize)> = type_steps.iter().map(|&i| (z, i)).collect();
            let zt = g.rows(&rows);
            let mask = if self.config.use_layout_mask {
                let m = self.g_layouts(g, &f.vars)?;
                let mrows: Vec<(Var, usize)> = type_steps.iter().map(|&i| (m, plan[i].var)).collect();
                Some(g.rows(&mrows))
            } else {
                None
            };
            let logits = self.g_type_logits(g, zt, mask);
            let targets: Vec<(usize, usize)> = type_steps.iter().enumerate().map(|(r, &i)| (r, labels[i])).collect();
            parts.push(g.nll_rows(logits, &targets));
        }
        let name_steps: Vec<usize> = included.iter().copied().filter(|&i| plan[i].kind == StepKind::Name).collect();
        if !name_steps.is_empty() {
            let rows: Vec<(Var, usize)> = name_steps.iter().map(|&i| (z, i)).collect();
            let zn = g.rows(&rows);
            let logits = self.g_name_logits(g, zn);
            let targets: Vec<(usize, usize)> = name_steps.iter().enumerate().map(|(r, &i)| (r, labels[i])).collect();
            parts.push(g.nll_rows(logits, &targets));
        }
        let total = match parts.as_slice() {
            [one] => *one,
            [a, b] => g.add(*a, *b),
            _ => unreachable!("at most two loss parts"),
        };
        Ok(Some((total, included.len())))
    }

    /// Mean teacher-forced NLL over every included step of `batch`.
    pub fn loss(&self, batch: &[FunctionInput]) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0;
        for f in batch {
            let mut g = Graph::eval(&self.params);
            if let Some((l, n)) = self.loss_sum(&mut g, f)? {
                sum += g.scalar(l);
                count += n;
            }
        }
        if count == 0 {
            return Err(Error::Model("batch has no steps that contribute to the loss".into()));
        }
        Ok(sum / count as f64)
    }

    // ---- matrix-level operations ----

    pub fn encode_code(&self, ids: &[usize]) -> Result<Array2<f64>> {
        let mut g = Graph::eval(&self.params);
        let h = self.g_encode_code(&mut g, ids)?;
        Ok(g.value(h).clone())
    }

    pub fn encode_layout(&self, ids: &[usize]) -> Result<Array1<f64>> {
        let mut g = Graph::eval(&self.params);
        let m = self.g_encode_layout(&mut g, ids)?;
        Ok(g.value(m).row(0).to_owned())
    }

    /// Decoder state of the last step in `steps` given the preceding labels.
    pub fn decode_step(&self, h: &Array2<f64>, v: &Array2<f64>, steps: &[Step], history: &[usize]) -> Result<Array1<f64>> {
        let mut g = Graph::eval(&self.params);
        let hv = g.constant(h.clone());
        let vv = g.constant(v.clone());
        let z = self.g_decode(&mut g, hv, vv, steps, history)?;
        Ok(g.value(z).row(steps.len() - 1).to_owned())
    }

    /// Unmasked logits for one decoder state.
    pub fn output_logits(&self, z: &Array1<f64>, kind: StepKind) -> Vec<f64> {
        let mut g = Graph::eval(&self.params);
        let zv = g.constant(z.clone().insert_axis(Axis(0)));
        let s = match kind {
            StepKind::Type => self.g_type_logits(&mut g, zv, None),
            StepKind::Name => self.g_name_logits(&mut g, zv),
        };
        g.value(s).row(0).to_vec()
    }

    /// Adds the layout soft mask `W_m m` to type logits.
    pub fn apply_layout_mask(&self, s: &[f64], m: &Array1<f64>, kind: StepKind) -> Result<Vec<f64>> {
        if kind != StepKind::Type {
            return Err(Error::Model("the layout mask applies to type steps only".into()));
        }
        if s.len() != self.config.type_vocab_size {
            return Err(Error::Model(format!("{} logits for {} types", s.len(), self.config.type_vocab_size)));
        }
        let mut g = Graph::eval(&self.params);
        let mv = g.constant(m.clone().insert_axis(Axis(0)));
        let wm = g.param(self.ids.mask_w);
        let delta = g.matmul_bt(mv, wm);
        Ok(s.iter().zip(g.value(delta).row(0)).map(|(a, b)| a + b).collect())
    }

    /// Runs the encoders once so that decoder steps can be scored repeatedly.
    pub fn session(&self, f: &FunctionInput) -> Result<ModelSession<'_>> {
        let plan = self.plan(f.vars.len());
        if f.vars.is_empty() {
            return Ok(ModelSession {
                model: self,
                h: Array2::zeros((0, self.config.d_model)),
                v: Array2::zeros((0, self.config.d_model)),
                m: None,
                plan,
            });
        }
        let mut g = Graph::eval(&self.params);
        let h = self.g_encode_code(&mut g, &f.subword_ids)?;
        let v = self.g_variables(&mut g, h, &f.vars)?;
        let m = if self.config.use_layout_mask {
            let m = self.g_layouts(&mut g, &f.vars)?;
            Some(g.value(m).clone())
        } else {
            None
        };
        Ok(ModelSession {
            model: self,
            h: g.value(h).clone(),
            v: g.value(v).clone(),
            m,
            plan,
        })
    }
}

/// Mean of the rows of `h` at `occurrences`.
pub fn pool_variable(h: &Array2<f64>, occurrences: &[usize]) -> Result<Array1<f64>> {
    if occurrences.is_empty() {
        return Err(Error::Model("cannot pool an empty occurrence set".into()));
    }
    let store = ParamStore::new();
    let mut g = Graph::eval(&store);
    let hv = g.constant(h.clone());
    if let Some(bad) = occurrences.iter().find(|&&o| o >= h.nrows()) {
        return Err(Error::Model(format!("occurrence {bad} beyond {} rows", h.nrows())));
    }
    let v = g.mean_rows(hv, occurrences);
    Ok(g.value(v).row(0).to_owned())
}

pub fn step_distribution(logits: &[f64]) -> Vec<f64> {
    softmax(logits)
}

/// Encoder outputs of one function, reused across decoder calls.
pub struct ModelSession<'m> {
    model: &'m Model,
    pub h: Array2<f64>,
    pub v: Array2<f64>,
    pub m: Option<Array2<f64>>,
    pub plan: Vec<Step>,
}

impl ModelSession<'_> {
    pub fn model(&self) -> &Model {
        self.model
    }

    /// Logits of step `prefix.len()` given the labels chosen so far.
    pub fn step_logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let k = prefix.len();
        let step = *self
            .plan
            .get(k)
            .ok_or_else(|| Error::Model(format!("prefix of {k} labels covers the whole plan")))?;
        let model = self.model;
        let mut g = Graph::eval(&model.params);
        let h = g.constant(self.h.clone());
        let v = g.constant(self.v.clone());
        let z = model.g_decode(&mut g, h, v, &self.plan[..=k], prefix)?;
        let zk = g.rows(&[(z, k)]);
        let logits = match step.kind {
            StepKind::Type => {
                let mask = self.m.as_ref().map(|m| g.constant(m.row(step.var).to_owned().insert_axis(Axis(0))));
                model.g_type_logits(&mut g, zk, mask)
            }
            StepKind::Name => model.g_name_logits(&mut g, zk),
        };
        Ok(g.value(logits).row(0).to_vec())
    }

    pub fn step_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.step_logits(prefix)?))
    }
}
