use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, ParamGroup};
use super::params::{index_params, init_params, param_group, LayerIdx, ParamIndex};
use super::router::{choose, entropy, Action, Mode, RouterParams, ACTIONS, FEATURES};
use super::{DataDims, ModelError};
use crate::autodiff::{gumbel_noise, softmax_slice, ParamStore, Tape, Tensor, Var};
use crate::data::{Role, SrcdSequence};
use crate::hash::mix_seed;
use crate::memory::{
    consolidation_loss, consolidation_quality, ct_forward_tape, semantic_forward_tape, CtVars,
    EpisodicBuffer, SemanticVars, WriteDecision,
};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;
/// Added to masked attention scores and disabled router logits.
const MASKED: f64 = -1e30;

/// Per-batch counters. Routing counts cover every (token, layer) pair.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub decisions: u64,
    pub actions: [u64; ACTIONS],
    /// Episodic reads executed, including reads of an empty buffer.
    pub attention_ops: u64,
    pub cold_reads: u64,
    pub shadow_ops: u64,
    pub writes: u64,
    pub evictions: u64,
    pub q_sum: f64,
    pub queries: u64,
    pub correct: u64,
    pub ce_sum: f64,
    pub dyn_sq_err: f64,
    pub dyn_count: u64,
}

impl StepStats {
    pub fn merge(&mut self, o: &StepStats) {
        self.decisions += o.decisions;
        for (a, b) in self.actions.iter_mut().zip(o.actions) {
            *a += b;
        }
        self.attention_ops += o.attention_ops;
        self.cold_reads += o.cold_reads;
        self.shadow_ops += o.shadow_ops;
        self.writes += o.writes;
        self.evictions += o.evictions;
        self.q_sum += o.q_sum;
        self.queries += o.queries;
        self.correct += o.correct;
        self.ce_sum += o.ce_sum;
        self.dyn_sq_err += o.dyn_sq_err;
        self.dyn_count += o.dyn_count;
    }

    fn frac(a: u64, b: u64) -> f64 {
        if b == 0 {
            0.0
        } else {
            a as f64 / b as f64
        }
    }

    pub fn attention_fraction(&self) -> f64 {
        Self::frac(self.attention_ops, self.decisions)
    }

    pub fn shadow_fraction(&self) -> f64 {
        Self::frac(self.shadow_ops, self.decisions)
    }

    pub fn routing_histogram(&self) -> [f64; ACTIONS] {
        self.actions.map(|a| Self::frac(a, self.decisions))
    }

    pub fn mean_q(&self) -> f64 {
        if self.decisions == 0 {
            0.0
        } else {
            self.q_sum / self.decisions as f64
        }
    }

    pub fn retrieval_accuracy(&self) -> f64 {
        Self::frac(self.correct, self.queries)
    }

    pub fn dynamics_mse(&self) -> f64 {
        if self.dyn_count == 0 {
            0.0
        } else {
            self.dyn_sq_err / self.dyn_count as f64
        }
    }
}

/// Routing of one query token that belongs to a recurring pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    /// Training step; 0 outside training.
    pub step: u64,
    pub seq: usize,
    pub pos: usize,
    pub pattern_id: usize,
    pub repetition: u64,
    /// Soft episodic probability averaged over layers.
    pub pi_episodic: f64,
    /// Layers whose hard action was episodic.
    pub episodic_layers: usize,
}

/// Scalar parts of the objective, summed per sequence and averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub task: f64,
    pub cross_entropy: f64,
    pub dynamics: f64,
    pub consolidation: f64,
    pub episodic_mass: f64,
    pub semantic_reward: f64,
}

pub(crate) struct Forward {
    pub loss: Var,
    pub parts: LossParts,
    pub stats: StepStats,
    pub records: Vec<RoutingRecord>,
    pub param_vars: Vec<Var>,
    /// `(param index, leaf)` for adapter copies that only see the consolidation loss.
    pub consolidation_vars: Vec<(usize, Var)>,
    /// Per layer `(h, a)` pairs; empty unless the model captures them.
    pub probe: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

struct LayerOut {
    out: Var,
    pi: Var,
    q: Vec<f64>,
    actions: Vec<Action>,
    cons: Option<Var>,
    cons_vars: Vec<(usize, Var)>,
    probe: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Per-layer signals that enter the tape as constants: router features,
/// consolidation quality, hard actions, executed reads and consolidation inputs.
#[derive(Clone, Debug)]
pub(crate) struct LayerSignals<T> {
    feats: Vec<T>,
    qs: Vec<f64>,
    actions: Vec<Action>,
    reads: Vec<(usize, Vec<usize>, bool)>,
    cons_in: Option<(Tensor<T>, Tensor<T>)>,
}

/// `Record` keeps the signals of each forward; `Replay` reuses them so that a
/// perturbed forward differs from the recorded one only through taped paths.
/// Both also compute the consolidation term outside train mode.
#[derive(Clone, Debug)]
pub(crate) enum Signals<T> {
    Live,
    Record(Vec<LayerSignals<T>>),
    Replay(Vec<LayerSignals<T>>),
}

/// Model weights plus the episodic buffers left by the last processed sequence.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub dims: DataDims,
    pub params: ParamStore<T>,
    pub(crate) index: ParamIndex,
    /// Snapshot of each layer's buffer after the most recent sequence.
    pub buffers: Vec<EpisodicBuffer<T>>,
    /// When set, forward passes keep `(layer input, episodic read)` rows per layer.
    pub(crate) capture_probe: bool,
    pub(crate) signals: Signals<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, dims: DataDims) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x1417));
        let params = init_params(&config, &dims, &mut rng);
        Self::from_params(config, dims, params)
    }

    pub fn from_params(
        config: ModelConfig,
        dims: DataDims,
        params: ParamStore<T>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let index = index_params(&params, &config, &dims)?;
        let buffers = (0..config.layers)
            .map(|_| EpisodicBuffer::new(config.capacity, T::of(config.novelty_threshold)))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            config,
            dims,
            params,
            index,
            buffers,
            capture_probe: false,
            signals: Signals::Live,
        })
    }

    pub fn group_of(&self, i: usize) -> ParamGroup {
        param_group(self.params.name(i)).expect("parameter names carry their group")
    }

    /// Adapter parameter indices, two per layer.
    pub(crate) fn adapter_indices(&self) -> Vec<usize> {
        self.index
            .layers
            .iter()
            .flat_map(|l| [l.w_down, l.w_up])
            .collect()
    }

    fn router(&self, l: &LayerIdx) -> RouterParams<T> {
        RouterParams {
            w1: self.params.get(l.r_w1).clone(),
            b1: self.params.get(l.r_b1).clone(),
            w2: self.params.get(l.r_w2).clone(),
            b2: self.params.get(l.r_b2).clone(),
        }
    }

    fn check_batch(&self, batch: &[SrcdSequence]) -> Result<usize, ModelError> {
        let len = batch
            .first()
            .ok_or_else(|| ModelError::Batch("empty batch".into()))?
            .len();
        for s in batch {
            if s.len() != len || len == 0 {
                return Err(ModelError::Batch(
                    "sequences in a batch must share a positive length".into(),
                ));
            }
            for t in &s.tokens {
                if t.symbol > self.dims.key_vocab || t.bound_value > self.dims.value_vocab {
                    return Err(ModelError::Batch(format!(
                        "token ids ({}, {}) exceed model vocab ({}, {})",
                        t.symbol, t.bound_value, self.dims.key_vocab, self.dims.value_vocab
                    )));
                }
                if t.role == Role::Query && !(1..=self.dims.value_vocab).contains(&t.target_value) {
                    return Err(ModelError::Batch(format!(
                        "query target {} outside 1..={}",
                        t.target_value, self.dims.value_vocab
                    )));
                }
                if !(t.v.is_finite() && t.dtau > 0.0 && t.dtau.is_finite()) {
                    return Err(ModelError::Batch("token dynamics not finite".into()));
                }
            }
        }
        Ok(len)
    }

    /// Records one forward pass on `tape`.
    ///
    /// `trainable[i]` decides whether parameter `i` becomes a gradient leaf.
    /// `rng` supplies Gumbel noise (train mode) and shadow-read sampling.
    pub(crate) fn forward(
        &mut self,
        tape: &mut Tape<T>,
        batch: &[SrcdSequence],
        mode: Mode,
        temperature: f64,
        trainable: &[bool],
        rng: &mut ChaCha8Rng,
    ) -> Result<Forward, ModelError> {
        let len = self.check_batch(batch)?;
        let b = batch.len();
        let n = b * len;
        tape.reset();
        let param_vars: Vec<Var> = (0..self.params.len())
            .map(|i| {
                let v = self.params.get(i).clone();
                if trainable[i] {
                    tape.param(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect();
        let p = |i: usize| param_vars[i];
        let ix = self.index.clone();

        let tokens: Vec<_> = batch.iter().flat_map(|s| s.tokens.iter()).collect();
        let sym: Vec<usize> = tokens.iter().map(|t| t.symbol).collect();
        let val: Vec<usize> = tokens.iter().map(|t| t.bound_value).collect();
        let role: Vec<usize> = tokens
            .iter()
            .map(|t| match t.role {
                Role::Plain => 0,
                Role::Key => 1,
                Role::Query => 2,
            })
            .collect();
        let log_gaps: Vec<T> = tokens.iter().map(|t| T::of(t.dtau.ln_1p())).collect();
        let cont = Tensor::new(
            vec![n, 2],
            tokens
                .iter()
                .flat_map(|t| [T::of(t.v), T::of(t.dtau.ln_1p())])
                .collect(),
        )?;

        let es = tape.gather_rows(p(ix.symbol), &sym)?;
        let ev = tape.gather_rows(p(ix.value), &val)?;
        let er = tape.gather_rows(p(ix.role), &role)?;
        let cv = tape.constant(cont);
        let ec = tape.matmul(cv, p(ix.cont))?;
        let x = tape.add(es, ev)?;
        let x = tape.add(x, er)?;
        let x = tape.add(x, ec)?;
        let mut x = tape.add(x, p(ix.bias))?;

        let log_gap = tape.constant(Tensor::new(vec![n, 1], log_gaps.clone())?);
        let mut stats = StepStats::default();
        let mut layer_outs: Vec<LayerOut> = Vec::with_capacity(self.config.layers);
        for (l, li) in ix.layers.iter().enumerate() {
            let out = self.layer_forward(
                tape,
                l,
                li,
                &param_vars,
                trainable,
                x,
                log_gap,
                &log_gaps,
                b,
                len,
                mode,
                temperature,
                rng,
                &mut stats,
            )?;
            x = out.out;
            layer_outs.push(out);
        }

        // task heads
        let inv_b = T::of(1.0 / b as f64);
        let pred = tape.matmul(x, p(ix.dyn_w))?;
        let pred = tape.add(pred, p(ix.dyn_b))?;
        let mut target = vec![T::zero(); n];
        let mut mask = vec![T::zero(); n];
        for s in 0..b {
            for t in 0..len - 1 {
                target[s * len + t] = T::of(batch[s].tokens[t + 1].v);
                mask[s * len + t] = T::one();
            }
        }
        let target = tape.constant(Tensor::new(vec![n, 1], target)?);
        let mask = tape.constant(Tensor::new(vec![n, 1], mask)?);
        let diff = tape.sub(pred, target)?;
        let diff = tape.mul(diff, mask)?;
        let sq = tape.square(diff)?;
        let mse = tape.sum(sq)?;
        stats.dyn_sq_err += tape.value(mse).item().as_f64();
        stats.dyn_count += (b * (len - 1)) as u64;

        let qrows: Vec<usize> = (0..n).filter(|&i| role[i] == 2).collect();
        let mut task = mse;
        let mut ce_value = 0.0;
        if !qrows.is_empty() {
            let hq = tape.gather_rows(x, &qrows)?;
            let logits = tape.matmul(hq, p(ix.head_w))?;
            let logits = tape.add(logits, p(ix.head_b))?;
            let targets: Vec<(usize, usize)> = qrows
                .iter()
                .enumerate()
                .map(|(k, &r)| (k, tokens[r].target_value - 1))
                .collect();
            let ce = tape.cross_entropy(logits, &targets)?;
            ce_value = tape.value(ce).item().as_f64();
            let lv = tape.value(logits);
            for (k, &(_, cls)) in targets.iter().enumerate() {
                let row = lv.row_slice(k);
                let best = (0..row.len()).fold(0, |m, j| if row[j] > row[m] { j } else { m });
                stats.queries += 1;
                stats.correct += u64::from(best == cls);
            }
            stats.ce_sum += ce_value;
            task = tape.add(task, ce)?;
        }
        let task = tape.scale(task, inv_b)?;

        // routing incentives and consolidation
        let w = self.config.loss;
        let mut total = task;
        let mut episodic_mass = 0.0;
        let mut semantic_reward = 0.0;
        let mut cons_value = 0.0;
        for lo in &layer_outs {
            let p2 = tape.select_col(lo.pi, 1)?;
            let e = tape.sum(p2)?;
            let p3 = tape.select_col(lo.pi, 2)?;
            let qc = tape.constant(Tensor::new(
                vec![n, 1],
                lo.q.iter().map(|&v| T::of(v)).collect(),
            )?);
            let sr = tape.mul(p3, qc)?;
            let s = tape.sum(sr)?;
            episodic_mass += tape.value(e).item().as_f64() / b as f64;
            semantic_reward += tape.value(s).item().as_f64() / b as f64;
            let e = tape.scale(e, T::of(w.lambda_e) * inv_b)?;
            let s = tape.scale(s, T::of(-w.lambda_s) * inv_b)?;
            total = tape.add(total, e)?;
            total = tape.add(total, s)?;
            if let Some(c) = lo.cons {
                cons_value += tape.value(c).item().as_f64();
                let c = tape.scale(c, T::of(w.gamma))?;
                total = tape.add(total, c)?;
            }
        }

        let mut records = Vec::new();
        for (r, tok) in tokens.iter().enumerate() {
            if tok.role == Role::Query && tok.pattern_id > 0 {
                let (mut pi2, mut hits) = (0.0, 0);
                for lo in &layer_outs {
                    pi2 += tape.value(lo.pi).at(r, 1).as_f64();
                    hits += usize::from(lo.actions[r] == Action::Episodic);
                }
                records.push(RoutingRecord {
                    step: 0,
                    seq: r / len,
                    pos: r % len,
                    pattern_id: tok.pattern_id,
                    repetition: tok.repetition,
                    pi_episodic: pi2 / layer_outs.len() as f64,
                    episodic_layers: hits,
                });
            }
        }

        let probe = layer_outs
            .iter_mut()
            .map(|lo| std::mem::take(&mut lo.probe))
            .collect();
        let consolidation_vars = layer_outs
            .iter()
            .flat_map(|lo| lo.cons_vars.clone())
            .collect();
        let parts = LossParts {
            total: tape.value(total).item().as_f64(),
            task: tape.value(task).item().as_f64(),
            cross_entropy: ce_value / b as f64,
            dynamics: tape.value(mse).item().as_f64() / b as f64,
            consolidation: cons_value,
            episodic_mass,
            semantic_reward,
        };
        Ok(Forward {
            loss: total,
            parts,
            stats,
            records,
            param_vars,
            consolidation_vars,
            probe,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_forward(
        &mut self,
        tape: &mut Tape<T>,
        l: usize,
        li: &LayerIdx,
        pv: &[Var],
        trainable: &[bool],
        x: Var,
        log_gap: Var,
        log_gaps: &[T],
        b: usize,
        len: usize,
        mode: Mode,
        temperature: f64,
        rng: &mut ChaCha8Rng,
        stats: &mut StepStats,
    ) -> Result<LayerOut, ModelError> {
        let cfg = &self.config;
        let abl = cfg.ablations;
        let d = cfg.d;
        let n = b * len;
        let ct = ct_forward_tape(
            tape,
            &CtVars {
                w1: pv[li.ct_w1],
                w2: pv[li.ct_w2],
                wo: pv[li.ct_wo],
                w_tau: pv[li.ct_w_tau],
            },
            x,
            log_gap,
            cfg.ct_steps,
        )?;
        let sem = SemanticVars {
            w_down: pv[li.w_down],
            w_up: pv[li.w_up],
        };
        let r_s = semantic_forward_tape(tape, &sem, x)?;
        let qm = tape.matmul(x, pv[li.w_q])?;
        let km = tape.matmul(x, pv[li.w_k])?;
        let vm = tape.matmul(x, pv[li.w_v])?;
        let mag = tape.row_norm(ct.h)?;
        let mags = tape.value(mag).data().to_vec();
        let rs = tape.value(r_s).data().to_vec();
        let qv = tape.value(qm).data().to_vec();
        let kv = tape.value(km).data().to_vec();
        let vv = tape.value(vm).data().to_vec();

        // sequential pass: quality, routing, reads and writes in token order
        let router = self.router(li);
        let mut logit_mask = [T::zero(); ACTIONS];
        if abl.no_semantic_path {
            logit_mask[Action::Semantic.index()] = T::of(MASKED);
        }
        let noise: Option<Tensor<T>> = (mode == Mode::Train).then(|| gumbel_noise(rng, n, ACTIONS));
        let replayed = match &self.signals {
            Signals::Replay(layers) => Some(layers[l].clone()),
            _ => None,
        };
        let (feats, qs, actions, reads, cons_in) = match replayed {
            Some(sig) => (sig.feats, sig.qs, sig.actions, sig.reads, sig.cons_in),
            None => {
                let thr = T::of(cfg.novelty_threshold);
                let sigma2 = T::of(cfg.quality_sigma2);
                let zeros = vec![T::zero(); d];
                let mut actions = vec![Action::CtOnly; n];
                let mut qs = vec![0.0; n];
                let mut feats = Vec::with_capacity(n * FEATURES);
                let mut reads: Vec<(usize, Vec<usize>, bool)> = Vec::new();
                for s in 0..b {
                    let mut buf = EpisodicBuffer::new(cfg.capacity, thr)?;
                    let mut prev_entropy = T::zero();
                    for t in 0..len {
                        let r = s * len + t;
                        let span = r * d..(r + 1) * d;
                        let qrow = &qv[span.clone()];
                        let reference: &[T] = match buf.nearest(qrow) {
                            Some(j) => {
                                let e = &buf.entries()[j];
                                e.cached.as_deref().unwrap_or(&e.value)
                            }
                            None => &zeros,
                        };
                        let q = consolidation_quality(&rs[span.clone()], reference, sigma2)?;
                        let mag = mags[r];
                        let z = [
                            log_gaps[r],
                            mag,
                            if abl.no_q_feature { T::zero() } else { q },
                            prev_entropy,
                        ];
                        // the magnitude column enters the taped router separately
                        feats.extend_from_slice(&[z[0], T::zero(), z[2], z[3]]);
                        let mut logits = router.logits(&z);
                        for (lg, m) in logits.iter_mut().zip(logit_mask) {
                            *lg = *lg + m;
                        }
                        prev_entropy = entropy(&softmax_slice(&logits));
                        let mut action = choose(&logits, noise.as_ref().map(|g| g.row_slice(r)));
                        if abl.ct_only {
                            action = Action::CtOnly;
                        } else if abl.full_attention {
                            action = Action::Episodic;
                        }
                        actions[r] = action;
                        qs[r] = q.as_f64();
                        stats.decisions += 1;
                        stats.actions[action.index()] += 1;
                        stats.q_sum += q.as_f64();
                        if action == Action::Episodic {
                            stats.attention_ops += 1;
                            let slots: Vec<usize> = buf.entries().iter().map(|e| e.slot).collect();
                            if buf.retrieve(qrow).cold {
                                stats.cold_reads += 1;
                            } else {
                                reads.push((r, slots, false));
                            }
                        } else if cfg.shadow_fraction > 0.0
                            && !buf.is_empty()
                            && rng.random::<f64>() < cfg.shadow_fraction
                        {
                            // forward weight 0; the read only feeds the straight-through gradient
                            let slots: Vec<usize> = buf.entries().iter().map(|e| e.slot).collect();
                            buf.shadow_retrieve(qrow);
                            reads.push((r, slots, true));
                            stats.shadow_ops += 1;
                        }
                        let krow = &kv[span.clone()];
                        let novelty = buf.novelty(krow);
                        match buf.write(krow.to_vec(), vv[span].to_vec(), t as u64, t, novelty) {
                            WriteDecision::Skipped => {}
                            WriteDecision::Inserted => stats.writes += 1,
                            WriteDecision::Replaced { .. } => {
                                stats.writes += 1;
                                stats.evictions += 1;
                            }
                        }
                    }
                    self.buffers[l] = buf;
                }
                (feats, qs, actions, reads, None)
            }
        };

        // differentiable reads, executed and shadow: masked attention over each sequence's rows
        let scale = T::of(1.0 / (d as f64).sqrt());
        let mut blocks = Vec::new();
        let mut rows = Vec::new();
        for s in 0..b {
            let these: Vec<&(usize, Vec<usize>, bool)> =
                reads.iter().filter(|(r, _, _)| r / len == s).collect();
            if these.is_empty() {
                continue;
            }
            let idx: Vec<usize> = these.iter().map(|(r, _, _)| *r).collect();
            let qs_ = tape.gather_rows(qm, &idx)?;
            let kb = tape.slice_rows(km, s * len, len)?;
            let vb = tape.slice_rows(vm, s * len, len)?;
            let sc = tape.matmul_nt(qs_, kb)?;
            let sc = tape.scale(sc, scale)?;
            let mut m = vec![T::of(MASKED); idx.len() * len];
            for (i, (_, slots, _)) in these.iter().enumerate() {
                for &sl in slots {
                    m[i * len + sl] = T::zero();
                }
            }
            let mk = tape.constant(Tensor::new(vec![idx.len(), len], m)?);
            let sc = tape.add(sc, mk)?;
            let a = tape.softmax(sc)?;
            blocks.push(tape.matmul(a, vb)?);
            rows.extend(idx);
        }
        let r_e = if blocks.is_empty() {
            tape.constant(Tensor::zeros(vec![n, d]))
        } else {
            let cat = tape.concat_rows(&blocks)?;
            tape.place_rows(n, &rows, cat)?
        };

        let probe = if self.capture_probe {
            let xv = tape.value(x);
            let rev = tape.value(r_e);
            let row = |t: &Tensor<T>, r: usize| t.row_slice(r).iter().map(|v| v.as_f64()).collect();
            rows.iter().map(|&r| (row(xv, r), row(rev, r))).collect()
        } else {
            Vec::new()
        };

        // consolidation on detached inputs through separate adapter leaves
        let mut cons = None;
        let mut cons_vars = Vec::new();
        let mut cons_in_used = None;
        let live = matches!(self.signals, Signals::Live);
        if (mode == Mode::Train || !live)
            && abl.consolidation_enabled()
            && cfg.loss.gamma > 0.0
            && trainable[li.w_down]
            && !rows.is_empty()
        {
            let (xc, ec) = match cons_in.clone() {
                Some(pair) => pair,
                None => {
                    let xv = tape.value(x);
                    let rev = tape.value(r_e);
                    let xc: Vec<T> = rows
                        .iter()
                        .flat_map(|&r| xv.row_slice(r).to_vec())
                        .collect();
                    let ec: Vec<T> = rows
                        .iter()
                        .flat_map(|&r| rev.row_slice(r).to_vec())
                        .collect();
                    (
                        Tensor::new(vec![rows.len(), d], xc)?,
                        Tensor::new(vec![rows.len(), d], ec)?,
                    )
                }
            };
            cons_in_used = Some((xc.clone(), ec.clone()));
            let xc = tape.constant(xc);
            let ec = tape.constant(ec);
            let down = tape.param(self.params.get(li.w_down).clone());
            let up = tape.param(self.params.get(li.w_up).clone());
            let rc = semantic_forward_tape(
                tape,
                &SemanticVars {
                    w_down: down,
                    w_up: up,
                },
                xc,
            )?;
            cons = Some(consolidation_loss(tape, rc, ec)?);
            cons_vars = vec![(li.w_down, down), (li.w_up, up)];
        }

        if let Signals::Record(layers) = &mut self.signals {
            layers.push(LayerSignals {
                feats: feats.clone(),
                qs: qs.clone(),
                actions: actions.clone(),
                reads: reads.clone(),
                cons_in: cons_in_used,
            });
        }

        // router recomputed on the tape from the recorded features
        let z = tape.constant(Tensor::new(vec![n, FEATURES], feats)?);
        let h = tape.matmul(z, pv[li.r_w1])?;
        let w_mag = tape.slice_rows(pv[li.r_w1], 1, 1)?;
        let hm = tape.matmul(mag, w_mag)?;
        let h = tape.add(h, hm)?;
        let h = tape.add(h, pv[li.r_b1])?;
        let h = tape.relu(h)?;
        let lg = tape.matmul(h, pv[li.r_w2])?;
        let mut lg = tape.add(lg, pv[li.r_b2])?;
        if abl.no_semantic_path {
            let m = tape.constant(Tensor::row(logit_mask.to_vec()));
            lg = tape.add(lg, m)?;
        }
        let pi = tape.softmax(lg)?;
        let onehot = Tensor::from_fn(vec![n, ACTIONS], |i| {
            if actions[i / ACTIONS].index() == i % ACTIONS {
                T::one()
            } else {
                T::zero()
            }
        });
        let weights = match noise {
            Some(g) => {
                let g = tape.constant(g);
                let y = tape.add(lg, g)?;
                let y = tape.scale(y, T::of(1.0 / temperature))?;
                let soft = tape.softmax(y)?;
                let offset = onehot.zip_map(tape.value(soft), |h, s| h - s);
                let offset = tape.constant(offset);
                tape.add(soft, offset)?
            }
            None => tape.constant(onehot),
        };
        let w_e = tape.select_col(weights, Action::Episodic.index())?;
        let w_s = tape.select_col(weights, Action::Semantic.index())?;
        let me = tape.scale_rows(r_e, w_e)?;
        let ms = tape.scale_rows(r_s, w_s)?;
        let mem = tape.add(me, ms)?;

        let y = tape.add(ct.out, mem)?;
        let y = tape.layer_norm(y, T::of(LN_EPS))?;
        let y = tape.mul(y, pv[li.ln1_gain])?;
        let y = tape.add(y, pv[li.ln1_bias])?;
        let f = tape.matmul(y, pv[li.f_w1])?;
        let f = tape.add(f, pv[li.f_b1])?;
        let f = tape.relu(f)?;
        let f = tape.matmul(f, pv[li.f_w2])?;
        let f = tape.add(f, pv[li.f_b2])?;
        let o = tape.add(y, f)?;
        let o = tape.layer_norm(o, T::of(LN_EPS))?;
        let o = tape.mul(o, pv[li.ln2_gain])?;
        let out = tape.add(o, pv[li.ln2_bias])?;
        Ok(LayerOut {
            out,
            pi,
            q: qs,
            actions,
            cons,
            cons_vars,
            probe,
        })
    }
}
