//! Item encoder: attributes, context, item IDs and interval features to the
//! per-position representation `Z`.

use rand::Rng;

use crate::dataset::{Dataset, FixedLengthExample};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Widths of every encoder tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub attr_width: usize,
    pub context_width: usize,
    pub d_a: usize,
    pub d_c: usize,
    pub d_f: usize,
    pub d_i: usize,
    pub d_v: usize,
    /// Rows of the item-ID lookup table, including the generic and padding rows.
    pub table_rows: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub w_a: ParamId,
    pub b_a: ParamId,
    pub w_c: ParamId,
    pub b_c: ParamId,
    pub w_f: ParamId,
    pub b_f: ParamId,
    pub id_table: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub w_q: ParamId,
    pub b_q: ParamId,
}

fn weight<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut R) -> ParamId {
    store.add(name, Tensor::glorot(&[rows, cols], rows, cols, rng))
}

fn bias(store: &mut ParamStore, name: &str, width: usize) -> ParamId {
    store.add(name, Tensor::zeros(&[width]))
}

impl EncoderParams {
    /// Registers the encoder parameters in `store`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dims: EncoderDims, rng: &mut R) -> Self {
        let EncoderDims {
            attr_width,
            context_width,
            d_a,
            d_c,
            d_f,
            d_i,
            d_v,
            table_rows,
        } = dims;
        EncoderParams {
            dims,
            w_a: weight(store, "encoder.w_a", attr_width, d_a, rng),
            b_a: bias(store, "encoder.b_a", d_a),
            w_c: weight(store, "encoder.w_c", context_width, d_c, rng),
            b_c: bias(store, "encoder.b_c", d_c),
            w_f: weight(store, "encoder.w_f", d_a + d_c, d_f, rng),
            b_f: bias(store, "encoder.b_f", d_f),
            id_table: store.add("encoder.id_table", Tensor::glorot(&[table_rows, d_i], d_i, d_i, rng)),
            w_v: weight(store, "encoder.w_v", d_i + d_f, d_v, rng),
            b_v: bias(store, "encoder.b_v", d_v),
            ln_gamma: store.add("encoder.ln_gamma", Tensor::full(&[d_v + 3], 1.0)),
            ln_beta: bias(store, "encoder.ln_beta", d_v + 3),
            w_q: weight(store, "encoder.w_q", d_v + 3, d_v, rng),
            b_q: bias(store, "encoder.b_q", d_v),
        }
    }
}

/// Switches that change how rows are encoded.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EncodeOptions {
    pub dropout: f64,
    pub training: bool,
    /// Replace interval features with zeros.
    pub no_intervals: bool,
}

/// `a' = attrs·W_a + b_a`.
pub fn encode_attributes(g: &mut Graph, p: &EncoderParams, attrs: Var) -> Result<Var> {
    let (w, b) = (g.param(p.w_a), g.param(p.b_a));
    g.linear(attrs, w, Some(b))
}

/// `c' = ctx·W_c + b_c`.
pub fn encode_context(g: &mut Graph, p: &EncoderParams, ctx: Var) -> Result<Var> {
    let (w, b) = (g.param(p.w_c), g.param(p.b_c));
    g.linear(ctx, w, Some(b))
}

/// `f = [a', c']·W_f + b_f`.
pub fn fuse_feature_context(g: &mut Graph, p: &EncoderParams, a: Var, c: Var) -> Result<Var> {
    let joined = g.concat_cols(&[a, c])?;
    let (w, b) = (g.param(p.w_f), g.param(p.b_f));
    g.linear(joined, w, Some(b))
}

/// `v = [id_table[row], f]·W_v + b_v`.
pub fn embed_and_fuse_ids(g: &mut Graph, p: &EncoderParams, rows: &[usize], f: Var) -> Result<Var> {
    let ids = g.embedding(p.id_table, rows)?;
    let joined = g.concat_cols(&[ids, f])?;
    let (w, b) = (g.param(p.w_v), g.param(p.b_v));
    g.linear(joined, w, Some(b))
}

/// Componentwise `(year, month, day)` differences between consecutive real
/// events. The first real event and all padding rows get zeros.
pub fn compute_intervals(calendar: &[[f64; 3]], padding: &[bool]) -> Tensor {
    let mut out = vec![0.0; calendar.len() * 3];
    for i in 1..calendar.len() {
        if padding[i] || padding[i - 1] {
            continue;
        }
        for c in 0..3 {
            out[i * 3 + c] = calendar[i][c] - calendar[i - 1][c];
        }
    }
    Tensor::new(vec![calendar.len(), 3], out).expect("three columns per row")
}

/// Rows of raw inputs for the encoder.
#[derive(Debug, Clone)]
pub struct EncoderInput {
    pub attributes: Tensor,
    pub contexts: Tensor,
    pub rows: Vec<usize>,
    pub intervals: Tensor,
}

/// Runs the full encoder on `n` independent-width rows and returns `n×d_v`.
pub fn encode_rows<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &EncoderParams,
    input: EncoderInput,
    opts: EncodeOptions,
    rng: &mut R,
) -> Result<Var> {
    let n = input.rows.len();
    if input.attributes.rows() != n || input.contexts.rows() != n || input.intervals.rows() != n {
        return Err(Error::dim(
            "encoder input rows",
            &[input.attributes.rows(), input.contexts.rows(), input.intervals.rows()],
            &[n],
        ));
    }
    let attrs = g.input(input.attributes);
    let ctx = g.input(input.contexts);
    let a = encode_attributes(g, p, attrs)?;
    let c = encode_context(g, p, ctx)?;
    let f = fuse_feature_context(g, p, a, c)?;
    let f = g.dropout(f, opts.dropout, opts.training, rng)?;
    let v = embed_and_fuse_ids(g, p, &input.rows, f)?;
    let v = g.dropout(v, opts.dropout, opts.training, rng)?;
    let intervals = if opts.no_intervals {
        Tensor::zeros(&[n, 3])
    } else {
        input.intervals
    };
    let dc = g.input(intervals);
    let joined = g.concat_cols(&[v, dc])?;
    let act = g.gelu(joined);
    let (gamma, beta) = (g.param(p.ln_gamma), g.param(p.ln_beta));
    let q = g.layer_norm(act, gamma, beta, LAYER_NORM_EPS)?;
    let (w, b) = (g.param(p.w_q), g.param(p.b_q));
    let z = g.linear(q, w, Some(b))?;
    let z = g.gelu(z);
    g.dropout(z, opts.dropout, opts.training, rng)
}

/// `Z` for the input window of an example, `L×d_v`. Padding rows are encoded
/// from the padding ID row and zero features.
pub fn encode_sequence<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &EncoderParams,
    example: &FixedLengthExample,
    opts: EncodeOptions,
    rng: &mut R,
) -> Result<Var> {
    let input = EncoderInput {
        attributes: example.input_attributes.clone(),
        contexts: example.input_contexts.clone(),
        rows: example.input_rows.clone(),
        intervals: compute_intervals(&example.input_calendar, &example.padding_mask),
    };
    encode_rows(g, p, input, opts, rng)
}

/// Items to score, all sharing one context vector.
#[derive(Debug, Clone)]
pub struct Candidates {
    pub items: Vec<usize>,
    pub rows: Vec<usize>,
    pub attributes: Tensor,
    pub context: Vec<f64>,
}

impl Candidates {
    pub fn new(ds: &Dataset, items: Vec<usize>, context: Vec<f64>) -> Self {
        let width = ds.attr_width();
        let mut attrs = Vec::with_capacity(items.len() * width);
        for &i in &items {
            attrs.extend_from_slice(ds.attributes_of(i));
        }
        Candidates {
            rows: items.iter().map(|&i| ds.vocab().row_of(i)).collect(),
            attributes: Tensor::new(vec![items.len(), width], attrs).expect("sized above"),
            items,
            context,
        }
    }

    /// Positive target first, then the example's negatives.
    pub fn from_example(ds: &Dataset, example: &FixedLengthExample) -> Self {
        Candidates::new(ds, example.candidates(), example.candidate_context.clone())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Encodes each candidate as a length-one sequence with zero interval, `n×d_v`.
pub fn encode_target_items<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &EncoderParams,
    candidates: &Candidates,
    opts: EncodeOptions,
    rng: &mut R,
) -> Result<Var> {
    let n = candidates.len();
    let cw = candidates.context.len();
    let mut ctx = Vec::with_capacity(n * cw);
    for _ in 0..n {
        ctx.extend_from_slice(&candidates.context);
    }
    let input = EncoderInput {
        attributes: candidates.attributes.clone(),
        contexts: Tensor::new(vec![n, cw], ctx)?,
        rows: candidates.rows.clone(),
        intervals: Tensor::zeros(&[n, 3]),
    };
    encode_rows(g, p, input, opts, rng)
}
