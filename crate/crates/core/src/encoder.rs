//! LSTM runners and the pooled sentence encoders.
//!
//! Four LSTMs take part: forward prefix (→Lp), forward suffix (→Ls),
//! backward prefix (←Lp) and backward suffix (←Ls). With a sentence of `n`
//! words and 0-based row index `i`:
//!
//! - forward prefix row `i` encodes words `0..=i` read left to right;
//! - forward suffix row `i` encodes words `i..n` read left to right;
//! - backward prefix row `i` encodes words `n-1, …, i` (right to left);
//! - backward suffix row `i` encodes words `i, …, 0` (right to left).
//!
//! Every run starts from a zero hidden and cell state.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::NumArray;

thread_local! {
    static CELL_STEPS: Cell<u64> = const { Cell::new(0) };
}

/// Number of LSTM cell invocations on this thread since the last reset.
/// A batched invocation over several rows counts once.
pub fn cell_steps() -> u64 {
    CELL_STEPS.with(Cell::get)
}

pub fn reset_cell_steps() {
    CELL_STEPS.with(|c| c.set(0));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "sufisent")]
    SufiSent,
    #[serde(rename = "sufisent-tied")]
    SufiSentTied,
    #[serde(rename = "sufisent-cat")]
    SufiSentCat,
    #[serde(rename = "sufisent-cat-tied")]
    SufiSentCatTied,
    #[serde(rename = "bilstm-max")]
    BiLstmMax,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SufiSent,
        Variant::SufiSentTied,
        Variant::SufiSentCat,
        Variant::SufiSentCatTied,
        Variant::BiLstmMax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SufiSent => "sufisent",
            Variant::SufiSentTied => "sufisent-tied",
            Variant::SufiSentCat => "sufisent-cat",
            Variant::SufiSentCatTied => "sufisent-cat-tied",
            Variant::BiLstmMax => "bilstm-max",
        }
    }

    pub fn is_tied(self) -> bool {
        matches!(self, Variant::SufiSentTied | Variant::SufiSentCatTied)
    }

    pub fn is_cat(self) -> bool {
        matches!(self, Variant::SufiSentCat | Variant::SufiSentCatTied)
    }

    pub fn uses_suffix(self) -> bool {
        self != Variant::BiLstmMax
    }

    /// Whether separate suffix LSTMs are stored.
    pub fn has_own_suffix_params(self) -> bool {
        self.uses_suffix() && !self.is_tied()
    }

    pub fn encoding_dim(self, hidden: usize) -> usize {
        if self.is_cat() {
            4 * hidden
        } else {
            2 * hidden
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant: Variant,
    /// LSTM hidden size.
    pub hidden: usize,
    /// Word embedding size.
    pub embed: usize,
}

impl EncoderConfig {
    pub fn new(variant: Variant, hidden: usize, embed: usize) -> Result<Self> {
        if hidden == 0 || embed == 0 {
            return Err(Error::Config(format!("hidden ({hidden}) and embed ({embed}) sizes must be positive")));
        }
        Ok(Self { variant, hidden, embed })
    }

    pub fn encoding_dim(&self) -> usize {
        self.variant.encoding_dim(self.hidden)
    }
}

/// Weights of one LSTM. Gate blocks are stacked in the order input, forget,
/// candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `4d × e`
    pub wx: NumArray,
    /// `4d × d`
    pub wh: NumArray,
    /// `4d`
    pub b: NumArray,
}

impl LstmParams {
    pub fn zeros(hidden: usize, embed: usize) -> Self {
        Self {
            wx: NumArray::zeros(&[4 * hidden, embed]),
            wh: NumArray::zeros(&[4 * hidden, hidden]),
            b: NumArray::zeros(&[4 * hidden]),
        }
    }

    /// Weights uniform on `(−1/√d, 1/√d)`, biases zero.
    pub fn init<R: Rng + ?Sized>(hidden: usize, embed: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            wx: NumArray::uniform(&[4 * hidden, embed], bound, rng),
            wh: NumArray::uniform(&[4 * hidden, hidden], bound, rng),
            b: NumArray::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.wh.cols()
    }

    pub fn embed(&self) -> usize {
        self.wx.cols()
    }

    pub fn shapes(hidden: usize, embed: usize) -> [Vec<usize>; 3] {
        [vec![4 * hidden, embed], vec![4 * hidden, hidden], vec![4 * hidden]]
    }

    pub fn validate(&self, hidden: usize, embed: usize) -> Result<()> {
        let expected = Self::shapes(hidden, embed);
        for (arr, want) in [&self.wx, &self.wh, &self.b].into_iter().zip(&expected) {
            if arr.shape() != want.as_slice() {
                return Err(Error::shape("LstmParams", want, arr.shape()));
            }
        }
        Ok(())
    }

    fn arrays(&self) -> [&NumArray; 3] {
        [&self.wx, &self.wh, &self.b]
    }

    fn arrays_mut(&mut self) -> [&mut NumArray; 3] {
        [&mut self.wx, &mut self.wh, &mut self.b]
    }
}

/// Parameters for all LSTMs of an encoder.
///
/// In tied variants the suffix LSTMs are not stored separately: the suffix
/// accessors return the prefix parameters, so a single array receives every
/// update. `BiLstmMax` stores no suffix LSTMs at all.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub fwd_prefix: LstmParams,
    pub fwd_suffix: Option<LstmParams>,
    pub bwd_prefix: LstmParams,
    pub bwd_suffix: Option<LstmParams>,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Self {
        let (d, e) = (config.hidden, config.embed);
        let own = config.variant.has_own_suffix_params();
        let fwd_prefix = LstmParams::init(d, e, rng);
        let fwd_suffix = own.then(|| LstmParams::init(d, e, rng));
        let bwd_prefix = LstmParams::init(d, e, rng);
        let bwd_suffix = own.then(|| LstmParams::init(d, e, rng));
        Self {
            fwd_prefix,
            fwd_suffix,
            bwd_prefix,
            bwd_suffix,
        }
    }

    pub fn zeros(config: &EncoderConfig) -> Self {
        let (d, e) = (config.hidden, config.embed);
        let own = config.variant.has_own_suffix_params();
        Self {
            fwd_prefix: LstmParams::zeros(d, e),
            fwd_suffix: own.then(|| LstmParams::zeros(d, e)),
            bwd_prefix: LstmParams::zeros(d, e),
            bwd_suffix: own.then(|| LstmParams::zeros(d, e)),
        }
    }

    pub fn fwd_suffix(&self) -> &LstmParams {
        self.fwd_suffix.as_ref().unwrap_or(&self.fwd_prefix)
    }

    pub fn bwd_suffix(&self) -> &LstmParams {
        self.bwd_suffix.as_ref().unwrap_or(&self.bwd_prefix)
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        let variant = config.variant.name();
        let own = config.variant.has_own_suffix_params();
        if self.fwd_suffix.is_some() != own || self.bwd_suffix.is_some() != own {
            let reason = if own {
                "untied variant needs separate suffix LSTMs"
            } else {
                "tied and prefix-only variants must not store suffix LSTMs"
            };
            return Err(Error::Tying { variant, reason });
        }
        for p in self.lstms() {
            p.validate(config.hidden, config.embed)?;
        }
        Ok(())
    }

    /// Stored LSTMs with their names, in canonical order.
    fn lstms(&self) -> Vec<&LstmParams> {
        let mut out = vec![&self.fwd_prefix];
        out.extend(self.fwd_suffix.as_ref());
        out.push(&self.bwd_prefix);
        out.extend(self.bwd_suffix.as_ref());
        out
    }

    fn lstm_names(&self) -> Vec<&'static str> {
        let mut out = vec!["fwd_prefix"];
        if self.fwd_suffix.is_some() {
            out.push("fwd_suffix");
        }
        out.push("bwd_prefix");
        if self.bwd_suffix.is_some() {
            out.push("bwd_suffix");
        }
        out
    }

    /// Names of the stored arrays, e.g. `encoder.fwd_prefix.wx`.
    pub fn array_names(&self) -> Vec<String> {
        self.lstm_names()
            .into_iter()
            .flat_map(|l| ["wx", "wh", "b"].map(|a| format!("encoder.{l}.{a}")))
            .collect()
    }

    pub fn arrays(&self) -> Vec<&NumArray> {
        self.lstms().into_iter().flat_map(LstmParams::arrays).collect()
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut NumArray> {
        let mut out: Vec<&mut NumArray> = Vec::new();
        out.extend(self.fwd_prefix.arrays_mut());
        if let Some(p) = self.fwd_suffix.as_mut() {
            out.extend(p.arrays_mut());
        }
        out.extend(self.bwd_prefix.arrays_mut());
        if let Some(p) = self.bwd_suffix.as_mut() {
            out.extend(p.arrays_mut());
        }
        out
    }

    /// Expected `(name, shape)` of every stored array for `config`.
    pub fn expected_layout(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
        let zeros = Self::zeros(config);
        zeros
            .array_names()
            .into_iter()
            .zip(zeros.arrays().into_iter().map(|a| a.shape().to_vec()))
            .collect()
    }

    /// Rebuilds parameters from arrays in [`arrays`](Self::arrays) order.
    pub fn from_arrays(config: &EncoderConfig, arrays: Vec<NumArray>) -> Result<Self> {
        let mut params = Self::zeros(config);
        let slots = params.arrays_mut();
        if slots.len() != arrays.len() {
            return Err(Error::shape("EncoderParams::from_arrays", &[slots.len()], &[arrays.len()]));
        }
        for (slot, arr) in slots.into_iter().zip(arrays) {
            if slot.shape() != arr.shape() {
                return Err(Error::shape("EncoderParams::from_arrays", slot.shape(), arr.shape()));
            }
            *slot = arr;
        }
        Ok(params)
    }
}

/// Which of the four state families a [`StateSequence`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateKind {
    ForwardPrefix,
    ForwardSuffix,
    BackwardPrefix,
    BackwardSuffix,
}

/// Hidden states for each window of a sentence, one row per word index.
/// See the module docs for which words row `i` has consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSequence {
    pub kind: StateKind,
    pub states: NumArray,
}

impl StateSequence {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.states.row(i)
    }
}

/// An LSTM's parameters placed on a graph, with pre-transposed weights.
#[derive(Debug, Clone, Copy)]
pub struct LstmNodes {
    pub wx: NodeId,
    pub wh: NodeId,
    pub b: NodeId,
    wx_t: NodeId,
    wh_t: NodeId,
    hidden: usize,
}

impl LstmNodes {
    pub fn bind(g: &mut Graph, params: &LstmParams, trainable: bool) -> Result<Self> {
        let leaf = |g: &mut Graph, a: &NumArray| {
            if trainable {
                g.param(a.clone())
            } else {
                g.constant(a.clone())
            }
        };
        let wx = leaf(g, &params.wx)?;
        let wh = leaf(g, &params.wh)?;
        let b = leaf(g, &params.b)?;
        let wx_t = g.transpose(wx)?;
        let wh_t = g.transpose(wh)?;
        Ok(Self {
            wx,
            wh,
            b,
            wx_t,
            wh_t,
            hidden: params.hidden(),
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Input projection `x·Wxᵀ + b` for every row of `x` (`k × e` → `k × 4d`).
    pub fn project(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let xw = g.matmul(x, self.wx_t)?;
        g.add_row_bias(xw, self.b)
    }

    /// One cell step for each row of a projected input. `state` is `(h, c)`
    /// with the same row count, or `None` for the zero state.
    pub fn cell(&self, g: &mut Graph, proj: NodeId, state: Option<(NodeId, NodeId)>) -> Result<(NodeId, NodeId)> {
        CELL_STEPS.with(|c| c.set(c.get() + 1));
        let d = self.hidden;
        let pre = match state {
            Some((h, _)) => {
                let hw = g.matmul(h, self.wh_t)?;
                g.add(proj, hw)?
            }
            None => proj,
        };
        let i_pre = g.slice_cols(pre, 0, d)?;
        let f_pre = g.slice_cols(pre, d, 2 * d)?;
        let g_pre = g.slice_cols(pre, 2 * d, 3 * d)?;
        let o_pre = g.slice_cols(pre, 3 * d, 4 * d)?;
        let input = g.sigmoid(i_pre)?;
        let forget = g.sigmoid(f_pre)?;
        let cand = g.tanh(g_pre)?;
        let output = g.sigmoid(o_pre)?;
        let write = g.mul(input, cand)?;
        let c = match state {
            Some((_, c_prev)) => {
                let keep = g.mul(forget, c_prev)?;
                g.add(keep, write)?
            }
            None => write,
        };
        let tc = g.tanh(c)?;
        let h = g.mul(output, tc)?;
        Ok((h, c))
    }
}

fn sentence_len(g: &Graph, x: NodeId, op: &'static str) -> Result<usize> {
    let n = g.value(x).rows();
    if g.value(x).ndim() != 2 || n == 0 {
        return Err(Error::Empty(op));
    }
    Ok(n)
}

/// Single left-to-right pass over a projected sentence; one cell step per word.
pub fn prefix_states_projected(g: &mut Graph, lstm: &LstmNodes, proj: NodeId) -> Result<NodeId> {
    let n = sentence_len(g, proj, "prefix_states")?;
    let mut state = None;
    let mut rows = Vec::with_capacity(n);
    for t in 0..n {
        let x_t = g.slice_rows(proj, t, t + 1)?;
        let (h, c) = lstm.cell(g, x_t, state)?;
        rows.push(h);
        state = Some((h, c));
    }
    g.vconcat(&rows)
}

/// All `n` suffix passes run as one shrinking batch.
///
/// At step `t`, batch row `i` is the suffix starting at word `i` and consumes
/// word `i + t`. Rows whose suffix is exhausted drop off the bottom, so step
/// `t` works on rows `0..n−t` and row `n−t−1` finishes.
pub fn suffix_states_projected(g: &mut Graph, lstm: &LstmNodes, proj: NodeId) -> Result<NodeId> {
    let n = sentence_len(g, proj, "suffix_states")?;
    let mut finals: Vec<Option<NodeId>> = vec![None; n];
    let mut state: Option<(NodeId, NodeId)> = None;
    for t in 0..n {
        let active = n - t;
        let inputs = g.slice_rows(proj, t, n)?;
        let carried = match state {
            Some((h, c)) if t > 0 => Some((g.slice_rows(h, 0, active)?, g.slice_rows(c, 0, active)?)),
            _ => None,
        };
        let (h, c) = lstm.cell(g, inputs, carried)?;
        finals[active - 1] = Some(g.slice_rows(h, active - 1, active)?);
        state = Some((h, c));
    }
    let rows: Vec<NodeId> = finals.into_iter().map(|r| r.expect("every suffix finishes")).collect();
    g.vconcat(&rows)
}

/// Reference suffix computation: an independent pass per suffix,
/// `n(n+1)/2` cell steps in total.
pub fn suffix_states_naive(g: &mut Graph, lstm: &LstmNodes, x: NodeId) -> Result<NodeId> {
    let n = sentence_len(g, x, "suffix_states")?;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let suffix = g.slice_rows(x, i, n)?;
        let proj = lstm.project(g, suffix)?;
        let states = prefix_states_projected(g, lstm, proj)?;
        rows.push(g.slice_rows(states, n - i - 1, n - i)?);
    }
    g.vconcat(&rows)
}

pub fn prefix_states_node(g: &mut Graph, lstm: &LstmNodes, x: NodeId) -> Result<NodeId> {
    sentence_len(g, x, "prefix_states")?;
    let proj = lstm.project(g, x)?;
    prefix_states_projected(g, lstm, proj)
}

pub fn suffix_states_node(g: &mut Graph, lstm: &LstmNodes, x: NodeId) -> Result<NodeId> {
    sentence_len(g, x, "suffix_states")?;
    let proj = lstm.project(g, x)?;
    suffix_states_projected(g, lstm, proj)
}

/// Backward prefix and suffix states: the forward runners applied to the
/// reversed sentence, with rows flipped back so row `i` follows the
/// convention in the module docs.
pub fn backward_direction_states_node(
    g: &mut Graph,
    prefix: &LstmNodes,
    suffix: &LstmNodes,
    x: NodeId,
) -> Result<(NodeId, NodeId)> {
    let n = sentence_len(g, x, "backward_direction_states")?;
    let rev: Vec<usize> = (0..n).rev().collect();
    let xr = g.select_rows(x, &rev)?;
    let p_proj = prefix.project(g, xr)?;
    let bp = prefix_states_projected(g, prefix, p_proj)?;
    let s_proj = if same_lstm(prefix, suffix) {
        p_proj
    } else {
        suffix.project(g, xr)?
    };
    let bs = suffix_states_projected(g, suffix, s_proj)?;
    Ok((g.select_rows(bp, &rev)?, g.select_rows(bs, &rev)?))
}

fn same_lstm(a: &LstmNodes, b: &LstmNodes) -> bool {
    a.wx == b.wx && a.wh == b.wh && a.b == b.b
}

/// The encoder's LSTMs placed on a graph. Tied suffix LSTMs share node ids
/// with their prefix counterparts, so gradients from both uses accumulate
/// on one set of leaves.
#[derive(Debug, Clone)]
pub struct EncoderNodes {
    pub config: EncoderConfig,
    pub fwd_prefix: LstmNodes,
    pub fwd_suffix: LstmNodes,
    pub bwd_prefix: LstmNodes,
    pub bwd_suffix: LstmNodes,
    leaves: Vec<NodeId>,
}

impl EncoderNodes {
    pub fn bind(g: &mut Graph, config: &EncoderConfig, params: &EncoderParams, trainable: bool) -> Result<Self> {
        params.validate(config)?;
        let fwd_prefix = LstmNodes::bind(g, &params.fwd_prefix, trainable)?;
        let fwd_suffix = match &params.fwd_suffix {
            Some(p) => LstmNodes::bind(g, p, trainable)?,
            None => fwd_prefix,
        };
        let bwd_prefix = LstmNodes::bind(g, &params.bwd_prefix, trainable)?;
        let bwd_suffix = match &params.bwd_suffix {
            Some(p) => LstmNodes::bind(g, p, trainable)?,
            None => bwd_prefix,
        };
        let mut leaves = vec![fwd_prefix.wx, fwd_prefix.wh, fwd_prefix.b];
        if params.fwd_suffix.is_some() {
            leaves.extend([fwd_suffix.wx, fwd_suffix.wh, fwd_suffix.b]);
        }
        leaves.extend([bwd_prefix.wx, bwd_prefix.wh, bwd_prefix.b]);
        if params.bwd_suffix.is_some() {
            leaves.extend([bwd_suffix.wx, bwd_suffix.wh, bwd_suffix.b]);
        }
        Ok(Self {
            config: *config,
            fwd_prefix,
            fwd_suffix,
            bwd_prefix,
            bwd_suffix,
            leaves,
        })
    }

    /// Leaf nodes in [`EncoderParams::arrays`] order.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    /// Pooled encoding of one sentence (`n × e` node). Rows whose mask entry
    /// is false are dropped before any LSTM sees the sentence.
    pub fn encode(&self, g: &mut Graph, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let v = g.value(x);
        if v.ndim() != 2 || v.rows() != mask.len() {
            return Err(Error::shape("encode", v.shape(), &[mask.len()]));
        }
        if v.cols() != self.config.embed {
            return Err(Error::shape("encode", v.shape(), &[mask.len(), self.config.embed]));
        }
        let real: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if real.is_empty() {
            return Err(Error::EmptyMask);
        }
        let x = if real.len() == mask.len() {
            x
        } else {
            g.select_rows(x, &real)?
        };
        let full = vec![true; real.len()];
        let variant = self.config.variant;

        let fp_proj = self.fwd_prefix.project(g, x)?;
        let fp_states = prefix_states_projected(g, &self.fwd_prefix, fp_proj)?;
        let fp = g.time_max_pool(fp_states, &full)?;

        if !variant.uses_suffix() {
            let bp_proj = {
                let rev: Vec<usize> = (0..real.len()).rev().collect();
                let xr = g.select_rows(x, &rev)?;
                self.bwd_prefix.project(g, xr)?
            };
            let bp_states = prefix_states_projected(g, &self.bwd_prefix, bp_proj)?;
            let bp = g.time_max_pool(bp_states, &full)?;
            return g.concat(&[fp, bp]);
        }

        let fs_proj = if same_lstm(&self.fwd_prefix, &self.fwd_suffix) {
            fp_proj
        } else {
            self.fwd_suffix.project(g, x)?
        };
        let fs_states = suffix_states_projected(g, &self.fwd_suffix, fs_proj)?;
        let fs = g.time_max_pool(fs_states, &full)?;

        let (bp_states, bs_states) = backward_direction_states_node(g, &self.bwd_prefix, &self.bwd_suffix, x)?;
        let bp = g.time_max_pool(bp_states, &full)?;
        let bs = g.time_max_pool(bs_states, &full)?;

        if variant.is_cat() {
            g.concat(&[fp, fs, bp, bs])
        } else {
            let fwd = g.max(fp, fs)?;
            let bwd = g.max(bp, bs)?;
            g.concat(&[fwd, bwd])
        }
    }
}

fn run_on_graph<T>(f: impl FnOnce(&mut Graph) -> Result<T>) -> Result<T> {
    let mut g = Graph::new();
    f(&mut g)
}

/// One cell step on plain vectors.
pub fn lstm_step(params: &LstmParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (d, e) = (params.hidden(), params.embed());
    if x.len() != e || h_prev.len() != d || c_prev.len() != d {
        return Err(Error::shape("lstm_step", &[e, d, d], &[x.len(), h_prev.len(), c_prev.len()]));
    }
    run_on_graph(|g| {
        let lstm = LstmNodes::bind(g, params, false)?;
        let xn = g.constant(NumArray::matrix(1, e, x.to_vec())?)?;
        let h0 = g.constant(NumArray::matrix(1, d, h_prev.to_vec())?)?;
        let c0 = g.constant(NumArray::matrix(1, d, c_prev.to_vec())?)?;
        let proj = lstm.project(g, xn)?;
        let (h, c) = lstm.cell(g, proj, Some((h0, c0)))?;
        Ok((g.value(h).data().to_vec(), g.value(c).data().to_vec()))
    })
}

fn check_sentence(params: &LstmParams, sentence: &NumArray, op: &'static str) -> Result<()> {
    if sentence.ndim() != 2 || sentence.rows() == 0 {
        return Err(Error::Empty(op));
    }
    if sentence.cols() != params.embed() {
        return Err(Error::shape(op, sentence.shape(), params.wx.shape()));
    }
    Ok(())
}

pub fn prefix_states(params: &LstmParams, sentence: &NumArray) -> Result<StateSequence> {
    check_sentence(params, sentence, "prefix_states")?;
    run_on_graph(|g| {
        let lstm = LstmNodes::bind(g, params, false)?;
        let x = g.constant(sentence.clone())?;
        let s = prefix_states_node(g, &lstm, x)?;
        Ok(StateSequence {
            kind: StateKind::ForwardPrefix,
            states: g.value(s).clone(),
        })
    })
}

pub fn suffix_states(params: &LstmParams, sentence: &NumArray) -> Result<StateSequence> {
    check_sentence(params, sentence, "suffix_states")?;
    run_on_graph(|g| {
        let lstm = LstmNodes::bind(g, params, false)?;
        let x = g.constant(sentence.clone())?;
        let s = suffix_states_node(g, &lstm, x)?;
        Ok(StateSequence {
            kind: StateKind::ForwardSuffix,
            states: g.value(s).clone(),
        })
    })
}

/// [`suffix_states`] computed one suffix at a time.
pub fn suffix_states_reference(params: &LstmParams, sentence: &NumArray) -> Result<StateSequence> {
    check_sentence(params, sentence, "suffix_states")?;
    run_on_graph(|g| {
        let lstm = LstmNodes::bind(g, params, false)?;
        let x = g.constant(sentence.clone())?;
        let s = suffix_states_naive(g, &lstm, x)?;
        Ok(StateSequence {
            kind: StateKind::ForwardSuffix,
            states: g.value(s).clone(),
        })
    })
}

pub fn backward_direction_states(
    prefix: &LstmParams,
    suffix: &LstmParams,
    sentence: &NumArray,
) -> Result<(StateSequence, StateSequence)> {
    check_sentence(prefix, sentence, "backward_direction_states")?;
    check_sentence(suffix, sentence, "backward_direction_states")?;
    run_on_graph(|g| {
        let p = LstmNodes::bind(g, prefix, false)?;
        let s = if std::ptr::eq(prefix, suffix) {
            p
        } else {
            LstmNodes::bind(g, suffix, false)?
        };
        let x = g.constant(sentence.clone())?;
        let (bp, bs) = backward_direction_states_node(g, &p, &s, x)?;
        Ok((
            StateSequence {
                kind: StateKind::BackwardPrefix,
                states: g.value(bp).clone(),
            },
            StateSequence {
                kind: StateKind::BackwardSuffix,
                states: g.value(bs).clone(),
            },
        ))
    })
}

/// Encodes one embedded sentence (`n × e`) to a vector of
/// `config.encoding_dim()` values.
pub fn encode(config: &EncoderConfig, params: &EncoderParams, sentence: &NumArray, mask: &[bool]) -> Result<Vec<f64>> {
    run_on_graph(|g| {
        let nodes = EncoderNodes::bind(g, config, params, false)?;
        let x = g.constant(sentence.clone())?;
        let out = nodes.encode(g, x, mask)?;
        Ok(g.value(out).data().to_vec())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent scalar-loop LSTM cell.
    fn oracle_step(p: &LstmParams, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = h.len();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut pre = vec![0.0; 4 * d];
        for (r, out) in pre.iter_mut().enumerate() {
            let mut s = p.b.data()[r];
            for (k, xk) in x.iter().enumerate() {
                s += p.wx.get2(r, k) * xk;
            }
            for (k, hk) in h.iter().enumerate() {
                s += p.wh.get2(r, k) * hk;
            }
            *out = s;
        }
        let mut h_new = vec![0.0; d];
        let mut c_new = vec![0.0; d];
        for j in 0..d {
            let i = sig(pre[j]);
            let f = sig(pre[d + j]);
            let g = pre[2 * d + j].tanh();
            let o = sig(pre[3 * d + j]);
            c_new[j] = f * c[j] + i * g;
            h_new[j] = o * c_new[j].tanh();
        }
        (h_new, c_new)
    }

    fn oracle_final(p: &LstmParams, rows: &[&[f64]]) -> Vec<f64> {
        let d = p.hidden();
        let (mut h, mut c) = (vec![0.0; d], vec![0.0; d]);
        for x in rows {
            (h, c) = oracle_step(p, x, &h, &c);
        }
        h
    }

    fn random_sentence(rng: &mut ChaCha8Rng, n: usize, e: usize) -> NumArray {
        NumArray::uniform(&[n, e], 1.0, rng)
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn encoding_dims() {
        assert_eq!(Variant::SufiSent.encoding_dim(2048), 4096);
        assert_eq!(Variant::SufiSentTied.encoding_dim(2048), 4096);
        assert_eq!(Variant::BiLstmMax.encoding_dim(2048), 4096);
        assert_eq!(Variant::SufiSentCat.encoding_dim(1024), 4096);
        assert_eq!(Variant::SufiSentCatTied.encoding_dim(1024), 4096);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("lstm".parse::<Variant>().is_err());
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let p = LstmParams::zeros(3, 2);
        let (h, c) = lstm_step(&p, &[0.7, -1.2], &[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(h, vec![0.0; 3]);
        assert_eq!(c, vec![0.0; 3]);
    }

    #[test]
    fn saturated_candidate_bias() {
        let d = 3;
        let mut p = LstmParams::zeros(d, 2);
        for j in 2 * d..3 * d {
            p.b.data_mut()[j] = 100.0;
        }
        let (h, c) = lstm_step(&p, &[0.3, 0.4], &[0.0; 3], &[0.0; 3]).unwrap();
        // c = σ(0)·tanh(100) = 0.5, h = σ(0)·tanh(0.5)
        let expected_h = 0.5 * 0.5f64.tanh();
        for j in 0..d {
            assert!((c[j] - 0.5).abs() < 1e-12);
            assert!((h[j] - expected_h).abs() < 1e-12);
            assert!((h[j] - 0.23106).abs() < 1e-5);
        }
    }

    #[test]
    fn step_matches_independent_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = LstmParams::init(5, 4, &mut rng);
        let p = LstmParams {
            b: NumArray::uniform(&[20], 0.5, &mut rng),
            ..p
        };
        let x = NumArray::uniform(&[4], 1.0, &mut rng);
        let h = NumArray::uniform(&[5], 1.0, &mut rng);
        let c = NumArray::uniform(&[5], 1.0, &mut rng);
        let (h1, c1) = lstm_step(&p, x.data(), h.data(), c.data()).unwrap();
        let (h2, c2) = oracle_step(&p, x.data(), h.data(), c.data());
        assert!(max_diff(&h1, &h2) < 1e-12);
        assert!(max_diff(&c1, &c2) < 1e-12);
    }

    #[test]
    fn step_shape_errors() {
        let p = LstmParams::zeros(3, 2);
        assert!(matches!(lstm_step(&p, &[0.0; 3], &[0.0; 3], &[0.0; 3]), Err(Error::Shape { .. })));
    }

    #[test]
    fn prefix_single_word_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LstmParams::init(4, 3, &mut rng);
        let x = random_sentence(&mut rng, 1, 3);
        let s = prefix_states(&p, &x).unwrap();
        let (h, _) = lstm_step(&p, x.row(0), &[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!(s.row(0), h.as_slice());

        let z = LstmParams::zeros(4, 3);
        let x = random_sentence(&mut rng, 6, 3);
        let s = prefix_states(&z, &x).unwrap();
        assert!(s.states.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prefix_rows_match_truncated_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = LstmParams::init(4, 3, &mut rng);
        let x = random_sentence(&mut rng, 7, 3);
        let s = prefix_states(&p, &x).unwrap();
        for i in 0..7 {
            let truncated = NumArray::matrix(i + 1, 3, x.data()[..(i + 1) * 3].to_vec()).unwrap();
            let t = prefix_states(&p, &truncated).unwrap();
            assert_eq!(s.row(i), t.row(i));
            let rows: Vec<&[f64]> = (0..=i).map(|k| x.row(k)).collect();
            assert!(max_diff(s.row(i), &oracle_final(&p, &rows)) < 1e-12);
        }
    }

    #[test]
    fn empty_sentence_is_rejected() {
        let p = LstmParams::zeros(2, 2);
        let x = NumArray::zeros(&[0, 2]);
        assert!(matches!(prefix_states(&p, &x), Err(Error::Empty(_))));
        assert!(matches!(suffix_states(&p, &x), Err(Error::Empty(_))));
        assert!(matches!(backward_direction_states(&p, &p, &x), Err(Error::Empty(_))));
    }

    #[test]
    fn suffix_single_word_and_last_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = LstmParams::init(4, 3, &mut rng);
        let one = random_sentence(&mut rng, 1, 3);
        assert_eq!(suffix_states(&p, &one).unwrap().states, prefix_states(&p, &one).unwrap().states);

        let x = random_sentence(&mut rng, 5, 3);
        let s = suffix_states(&p, &x).unwrap();
        let (h, _) = lstm_step(&p, x.row(4), &[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!(s.row(4), h.as_slice());
    }

    #[test]
    fn suffix_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = LstmParams::init(3, 2, &mut rng);
        let x = random_sentence(&mut rng, 6, 2);
        let s = suffix_states(&p, &x).unwrap();
        for i in 0..6 {
            let rows: Vec<&[f64]> = (i..6).map(|k| x.row(k)).collect();
            assert!(max_diff(s.row(i), &oracle_final(&p, &rows)) < 1e-12);
        }
    }

    #[test]
    fn step_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = LstmParams::init(3, 2, &mut rng);
        for n in 1..=9 {
            let x = random_sentence(&mut rng, n, 2);
            reset_cell_steps();
            prefix_states(&p, &x).unwrap();
            assert_eq!(cell_steps(), n as u64);
            reset_cell_steps();
            suffix_states(&p, &x).unwrap();
            assert_eq!(cell_steps(), n as u64);
            reset_cell_steps();
            suffix_states_reference(&p, &x).unwrap();
            assert_eq!(cell_steps(), (n * (n + 1) / 2) as u64);
        }
    }

    #[test]
    fn backward_states_follow_reversed_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lp = LstmParams::init(4, 3, &mut rng);
        let ls = LstmParams::init(4, 3, &mut rng);
        let n = 6;
        let x = random_sentence(&mut rng, n, 3);
        let (bp, bs) = backward_direction_states(&lp, &ls, &x).unwrap();
        assert_eq!(bp.kind, StateKind::BackwardPrefix);
        for i in 0..n {
            // ←hp,i consumes words n−1 … i
            let rows: Vec<&[f64]> = (i..n).rev().map(|k| x.row(k)).collect();
            assert!(max_diff(bp.row(i), &oracle_final(&lp, &rows)) < 1e-12);
            // ←hs,i consumes words i … 0
            let rows: Vec<&[f64]> = (0..=i).rev().map(|k| x.row(k)).collect();
            assert!(max_diff(bs.row(i), &oracle_final(&ls, &rows)) < 1e-12);
        }
    }

    #[test]
    fn backward_single_word() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = LstmParams::init(4, 3, &mut rng);
        let x = random_sentence(&mut rng, 1, 3);
        let (bp, bs) = backward_direction_states(&p, &p, &x).unwrap();
        let (h, _) = lstm_step(&p, x.row(0), &[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!(bp.row(0), h.as_slice());
        assert_eq!(bs.row(0), h.as_slice());
    }

    fn config(variant: Variant) -> EncoderConfig {
        EncoderConfig::new(variant, 4, 3).unwrap()
    }

    #[test]
    fn encode_dimension_per_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for v in Variant::ALL {
            let cfg = config(v);
            let params = EncoderParams::init(&cfg, &mut rng);
            for n in 1..5 {
                let x = random_sentence(&mut rng, n, 3);
                let u = encode(&cfg, &params, &x, &vec![true; n]).unwrap();
                assert_eq!(u.len(), cfg.encoding_dim());
            }
        }
    }

    #[test]
    fn tied_single_word_forward_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = config(Variant::SufiSentTied);
        let params = EncoderParams::init(&cfg, &mut rng);
        let x = random_sentence(&mut rng, 1, 3);
        let u = encode(&cfg, &params, &x, &[true]).unwrap();
        let hp = prefix_states(&params.fwd_prefix, &x).unwrap();
        assert_eq!(&u[..4], hp.row(0));
    }

    #[test]
    fn sufisent_is_blockwise_max_of_cat() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let plain = config(Variant::SufiSent);
        let cat = config(Variant::SufiSentCat);
        let params = EncoderParams::init(&plain, &mut rng);
        let x = random_sentence(&mut rng, 5, 3);
        let mask = [true; 5];
        let u = encode(&plain, &params, &x, &mask).unwrap();
        let b = encode(&cat, &params, &x, &mask).unwrap();
        for j in 0..4 {
            assert_eq!(u[j], b[j].max(b[4 + j]));
            assert_eq!(u[4 + j], b[8 + j].max(b[12 + j]));
        }
    }

    #[test]
    fn tying_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let untied = EncoderParams::init(&config(Variant::SufiSent), &mut rng);
        let tied = EncoderParams::init(&config(Variant::SufiSentTied), &mut rng);
        let x = random_sentence(&mut rng, 2, 3);
        assert!(matches!(
            encode(&config(Variant::SufiSentTied), &untied, &x, &[true, true]),
            Err(Error::Tying { .. })
        ));
        assert!(matches!(
            encode(&config(Variant::SufiSentCat), &tied, &x, &[true, true]),
            Err(Error::Tying { .. })
        ));
        assert!(matches!(
            encode(&config(Variant::BiLstmMax), &untied, &x, &[true, true]),
            Err(Error::Tying { .. })
        ));
    }

    #[test]
    fn all_false_mask_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = config(Variant::SufiSent);
        let params = EncoderParams::init(&cfg, &mut rng);
        let x = random_sentence(&mut rng, 2, 3);
        assert!(matches!(encode(&cfg, &params, &x, &[false, false]), Err(Error::EmptyMask)));
    }

    #[test]
    fn bilstm_max_uses_prefix_states_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = config(Variant::BiLstmMax);
        let params = EncoderParams::init(&cfg, &mut rng);
        let x = random_sentence(&mut rng, 4, 3);
        let u = encode(&cfg, &params, &x, &[true; 4]).unwrap();
        let fp = prefix_states(&params.fwd_prefix, &x).unwrap();
        let (bp, _) = backward_direction_states(&params.bwd_prefix, &params.bwd_prefix, &x).unwrap();
        for j in 0..4 {
            let f = (0..4).map(|i| fp.states.get2(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let b = (0..4).map(|i| bp.states.get2(i, j)).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(u[j], f);
            assert_eq!(u[4 + j], b);
        }
    }

    #[test]
    fn layout_names_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let cfg = config(Variant::SufiSent);
        let params = EncoderParams::init(&cfg, &mut rng);
        let names = params.array_names();
        assert_eq!(names.len(), 12);
        assert_eq!(names[3], "encoder.fwd_suffix.wx");
        let rebuilt = EncoderParams::from_arrays(&cfg, params.arrays().into_iter().cloned().collect()).unwrap();
        assert_eq!(rebuilt, params);
        assert_eq!(EncoderParams::expected_layout(&config(Variant::SufiSentTied)).len(), 6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn padding_never_changes_encoding(seed in any::<u64>(), n in 1usize..7, pad in 1usize..4, v in 0usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = config(Variant::ALL[v]);
            let params = EncoderParams::init(&cfg, &mut rng);
            let x = random_sentence(&mut rng, n, 3);
            let mut padded = x.data().to_vec();
            padded.extend(NumArray::uniform(&[pad, 3], 1.0, &mut rng).into_data());
            let padded = NumArray::matrix(n + pad, 3, padded).unwrap();
            let mut mask = vec![true; n];
            mask.extend(vec![false; pad]);
            let a = encode(&cfg, &params, &x, &vec![true; n]).unwrap();
            let b = encode(&cfg, &params, &padded, &mask).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
