//! Primitive operations: one enum, three interpreters.
//!
//! Every primitive is described by an [`Op`] value recorded on the graph.
//! The same descriptor drives the f32 forward kernels, the f32 backward
//! kernels, and a f64 replay used by the gradient checker. Keeping the three
//! interpreters in one file keeps their math in lockstep.
//!
//! Determinism contract: every kernel iterates in a fixed order and reduces
//! through fixed-shape accumulator trees, so identical inputs produce
//! bitwise-identical outputs on a given build.

use super::tensor::{Real, Tensor};

/// Operation descriptor. Side data (indices, constants, head counts) lives
/// here so the graph can be re-executed without the builder.
#[derive(Debug, Clone)]
pub enum Op {
    /// Input tensor (parameter or constant); value supplied at creation.
    Leaf,
    /// Elementwise sum of two same-shape tensors.
    Add,
    /// Elementwise product of two same-shape tensors.
    Mul,
    /// Multiply by a compile-time constant.
    Scale(f32),
    /// Add a constant to every element.
    AddScalar(f32),
    /// Elementwise `max(x, c)`.
    ClampMin(f32),
    Exp,
    Log,
    /// Elementwise `x^c`.
    Power(f32),
    /// `x * sigmoid(x)`.
    Silu,
    /// `[m,k] x [k,n] -> [m,n]`.
    Matmul,
    /// 2-d transpose.
    Transpose,
    Reshape(Vec<usize>),
    /// Rows `start..start+len` along axis 0.
    SliceRows { start: usize, len: usize },
    /// Concatenate two tensors along the last axis.
    ConcatLast,
    /// Row lookup: input `[vocab, d]` -> `[ids.len, d]`.
    Embedding { ids: Vec<u32> },
    /// Per-row gather along the last axis: input `[rows, v]` with
    /// `indices.len() == rows * group` -> `[rows, group]`.
    GatherLast { indices: Vec<u32>, group: usize },
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    /// Sum of all elements -> scalar.
    Sum,
    /// Mean of all elements -> scalar.
    Mean,
    /// Root-mean-square normalization over the last axis with a learned
    /// gain: inputs `(x, gain)`, gain length == last dim.
    RmsNorm { eps: f32 },
    /// Rotary position embedding on `[t, heads, d]`, positions `0..t`,
    /// half-split pairing `(i, i + d/2)`.
    Rope { theta: f32 },
    /// Causal scaled dot-product attention with grouped KV heads:
    /// `(q [t,h,d], k [t,hkv,d], v [t,hkv,d]) -> [t,h,d]`.
    Attention { n_heads: usize, n_kv_heads: usize },
    /// Identity forward, zero backward.
    StopGradient,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::ClampMin(_) => "clamp_min",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Power(_) => "power",
            Op::Silu => "silu",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatLast => "concat_last",
            Op::Embedding { .. } => "embedding_lookup",
            Op::GatherLast { .. } => "gather_last",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Rope { .. } => "rope",
            Op::Attention { .. } => "attention",
            Op::StopGradient => "stop_gradient",
        }
    }
}

// ---------------------------------------------------------------------------
// shared kernels
// ---------------------------------------------------------------------------

/// Dot product with eight independent accumulator lanes combined in a fixed
/// tree. Vectorizes without reassociating the serial order.
#[inline]
pub fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::ZERO; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let off = c * 8;
        for (l, slot) in acc.iter_mut().enumerate() {
            *slot = slot.add(a[off + l].mul(b[off + l]));
        }
    }
    let mut tail = S::ZERO;
    for i in chunks * 8..a.len() {
        tail = tail.add(a[i].mul(b[i]));
    }
    let s0 = acc[0].add(acc[1]);
    let s1 = acc[2].add(acc[3]);
    let s2 = acc[4].add(acc[5]);
    let s3 = acc[6].add(acc[7]);
    s0.add(s1).add(s2.add(s3)).add(tail)
}

/// `[m,k] x [k,n]`, ikj order so the inner loop runs contiguously over rows
/// of B and C.
pub fn k_matmul<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv = cv.add(av.mul(*bv));
            }
        }
    }
    c
}

/// `A x B^T` with A `[m,k]`, B `[n,k]` -> `[m,n]`; both operands are read
/// along contiguous rows.
pub fn k_matmul_nt<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `A^T x B` with A `[k,m]`, B `[k,n]` -> `[m,n]`, kij order.
pub fn k_matmul_tn<S: Real>(a: &[S], b: &[S], k: usize, m: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv = cv.add(av.mul(*bv));
            }
        }
    }
    c
}

/// Lane geometry for reductions along `axis` of `shape`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Max-subtracted softmax along `axis`.
pub fn k_softmax<S: Real>(x: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let (outer, len, inner) = lanes(shape, axis);
    let mut out = vec![S::ZERO; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut m = x[at(0)];
            for j in 1..len {
                m = m.max(x[at(j)]);
            }
            let mut z = S::ZERO;
            for j in 0..len {
                let e = x[at(j)].sub(m).exp();
                out[at(j)] = e;
                z = z.add(e);
            }
            for j in 0..len {
                out[at(j)] = out[at(j)].div(z);
            }
        }
    }
    out
}

/// Fused log-softmax along `axis`: `x - (max + ln(sum(exp(x - max))))`.
pub fn k_log_softmax<S: Real>(x: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let (outer, len, inner) = lanes(shape, axis);
    let mut out = vec![S::ZERO; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut m = x[at(0)];
            for j in 1..len {
                m = m.max(x[at(j)]);
            }
            let mut z = S::ZERO;
            for j in 0..len {
                z = z.add(x[at(j)].sub(m).exp());
            }
            let lse = m.add(z.ln());
            for j in 0..len {
                out[at(j)] = x[at(j)].sub(lse);
            }
        }
    }
    out
}

pub fn k_rms_norm<S: Real>(x: &[S], gain: &[S], rows: usize, d: usize, eps: S) -> Vec<S> {
    let mut out = vec![S::ZERO; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let ms = dot(row, row).div(S::from_usize(d));
        let inv = S::ONE.div(ms.add(eps).sqrt());
        let orow = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            orow[j] = gain[j].mul(row[j]).mul(inv);
        }
    }
    out
}

/// Rotation angles: position `p`, pair `i` -> `p * theta^(-2i/d)`.
pub fn k_rope<S: Real>(x: &[S], t: usize, h: usize, d: usize, theta: S) -> Vec<S> {
    let half = d / 2;
    let mut out = vec![S::ZERO; x.len()];
    let mut inv_freq = Vec::with_capacity(half);
    for i in 0..half {
        let expo = S::from_usize(2 * i).div(S::from_usize(d));
        inv_freq.push(S::ONE.div(theta.powf(expo)));
    }
    for p in 0..t {
        let pos = S::from_usize(p);
        for hi in 0..h {
            let base = (p * h + hi) * d;
            for i in 0..half {
                let ang = pos.mul(inv_freq[i]);
                let (sin, cos) = (ang.sin(), ang.cos());
                let a = x[base + i];
                let b = x[base + half + i];
                out[base + i] = a.mul(cos).sub(b.mul(sin));
                out[base + half + i] = a.mul(sin).add(b.mul(cos));
            }
        }
    }
    out
}

/// Causal GQA attention. Row `t` of the output depends only on rows `<= t`
/// of the inputs, computed in an order independent of the sequence length —
/// the bitwise-causality guarantee the decoder relies on.
pub fn k_attention<S: Real>(
    q: &[S],
    k: &[S],
    v: &[S],
    t: usize,
    h: usize,
    hkv: usize,
    d: usize,
) -> Vec<S> {
    let group = h / hkv;
    let scale = S::ONE.div(S::from_usize(d).sqrt());
    let mut out = vec![S::ZERO; t * h * d];
    let mut scores = vec![S::ZERO; t];
    for hi in 0..h {
        let g = hi / group;
        for ti in 0..t {
            let qrow = &q[(ti * h + hi) * d..][..d];
            let mut m = S::ZERO;
            for s in 0..=ti {
                let sc = dot(qrow, &k[(s * hkv + g) * d..][..d]).mul(scale);
                scores[s] = sc;
                m = if s == 0 { sc } else { m.max(sc) };
            }
            let mut z = S::ZERO;
            for s in 0..=ti {
                let e = scores[s].sub(m).exp();
                scores[s] = e;
                z = z.add(e);
            }
            let orow = &mut out[(ti * h + hi) * d..][..d];
            for s in 0..=ti {
                let p = scores[s].div(z);
                let vrow = &v[(s * hkv + g) * d..][..d];
                for j in 0..d {
                    orow[j] = orow[j].add(p.mul(vrow[j]));
                }
            }
        }
    }
    out
}

fn sigmoid<S: Real>(x: S) -> S {
    S::ONE.div(S::ONE.add(x.neg().exp()))
}

// ---------------------------------------------------------------------------
// generic forward dispatch
// ---------------------------------------------------------------------------

/// Forward evaluation over any scalar width. `shapes[i]` describes
/// `inputs[i]`; the caller guarantees shape validity (checked at recording
/// time). Returns the output buffer; the output shape is a function of the
/// op and input shapes and is computed once at recording time.
pub fn eval<S: Real>(op: &Op, inputs: &[&[S]], shapes: &[&[usize]]) -> Vec<S> {
    match op {
        Op::Leaf => unreachable!("leaf values are stored, not computed"),
        Op::Add => inputs[0]
            .iter()
            .zip(inputs[1])
            .map(|(a, b)| a.add(*b))
            .collect(),
        Op::Mul => inputs[0]
            .iter()
            .zip(inputs[1])
            .map(|(a, b)| a.mul(*b))
            .collect(),
        Op::Scale(c) => {
            let c = S::from_f32(*c);
            inputs[0].iter().map(|a| a.mul(c)).collect()
        }
        Op::AddScalar(c) => {
            let c = S::from_f32(*c);
            inputs[0].iter().map(|a| a.add(c)).collect()
        }
        Op::ClampMin(c) => {
            let c = S::from_f32(*c);
            inputs[0].iter().map(|a| a.max(c)).collect()
        }
        Op::Exp => inputs[0].iter().map(|a| a.exp()).collect(),
        Op::Log => inputs[0].iter().map(|a| a.ln()).collect(),
        Op::Power(c) => {
            let c = S::from_f32(*c);
            inputs[0].iter().map(|a| a.powf(c)).collect()
        }
        Op::Silu => inputs[0].iter().map(|a| a.mul(sigmoid(*a))).collect(),
        Op::Matmul => {
            let (m, k) = (shapes[0][0], shapes[0][1]);
            let n = shapes[1][1];
            k_matmul(inputs[0], inputs[1], m, k, n)
        }
        Op::Transpose => {
            let (r, c) = (shapes[0][0], shapes[0][1]);
            let mut out = vec![S::ZERO; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = inputs[0][i * c + j];
                }
            }
            out
        }
        Op::Reshape(_) => inputs[0].to_vec(),
        Op::SliceRows { start, len } => {
            let row: usize = shapes[0][1..].iter().product();
            inputs[0][start * row..(start + len) * row].to_vec()
        }
        Op::ConcatLast => {
            let la = *shapes[0].last().unwrap();
            let lb = *shapes[1].last().unwrap();
            let rows = inputs[0].len() / la;
            let mut out = Vec::with_capacity(rows * (la + lb));
            for r in 0..rows {
                out.extend_from_slice(&inputs[0][r * la..(r + 1) * la]);
                out.extend_from_slice(&inputs[1][r * lb..(r + 1) * lb]);
            }
            out
        }
        Op::Embedding { ids } => {
            let d = shapes[0][1];
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                let r = id as usize;
                out.extend_from_slice(&inputs[0][r * d..(r + 1) * d]);
            }
            out
        }
        Op::GatherLast { indices, group } => {
            let v = *shapes[0].last().unwrap();
            let rows = inputs[0].len() / v;
            let mut out = Vec::with_capacity(rows * group);
            for r in 0..rows {
                let row = &inputs[0][r * v..(r + 1) * v];
                for &ix in &indices[r * group..(r + 1) * group] {
                    out.push(row[ix as usize]);
                }
            }
            out
        }
        Op::Softmax { axis } => k_softmax(inputs[0], shapes[0], *axis),
        Op::LogSoftmax { axis } => k_log_softmax(inputs[0], shapes[0], *axis),
        Op::Sum => {
            let mut acc = S::ZERO;
            for x in inputs[0] {
                acc = acc.add(*x);
            }
            vec![acc]
        }
        Op::Mean => {
            let mut acc = S::ZERO;
            for x in inputs[0] {
                acc = acc.add(*x);
            }
            vec![acc.div(S::from_usize(inputs[0].len()))]
        }
        Op::RmsNorm { eps } => {
            let d = *shapes[0].last().unwrap();
            let rows = inputs[0].len() / d;
            k_rms_norm(inputs[0], inputs[1], rows, d, S::from_f32(*eps))
        }
        Op::Rope { theta } => {
            let (t, h, d) = (shapes[0][0], shapes[0][1], shapes[0][2]);
            k_rope(inputs[0], t, h, d, S::from_f32(*theta))
        }
        Op::Attention {
            n_heads,
            n_kv_heads,
        } => {
            let (t, d) = (shapes[0][0], shapes[0][2]);
            k_attention(inputs[0], inputs[1], inputs[2], t, *n_heads, *n_kv_heads, d)
        }
        Op::StopGradient => inputs[0].to_vec(),
    }
}

/// Output shape of an op; validated against the inputs at recording time.
pub fn output_shape(op: &Op, shapes: &[&[usize]]) -> Vec<usize> {
    match op {
        Op::Leaf => unreachable!(),
        Op::Add
        | Op::Mul
        | Op::Scale(_)
        | Op::AddScalar(_)
        | Op::ClampMin(_)
        | Op::Exp
        | Op::Log
        | Op::Power(_)
        | Op::Silu
        | Op::Softmax { .. }
        | Op::LogSoftmax { .. }
        | Op::StopGradient => shapes[0].to_vec(),
        Op::Matmul => vec![shapes[0][0], shapes[1][1]],
        Op::Transpose => vec![shapes[0][1], shapes[0][0]],
        Op::Reshape(s) => s.clone(),
        Op::SliceRows { len, .. } => {
            let mut s = shapes[0].to_vec();
            s[0] = *len;
            s
        }
        Op::ConcatLast => {
            let mut s = shapes[0].to_vec();
            *s.last_mut().unwrap() += shapes[1].last().unwrap();
            s
        }
        Op::Embedding { ids } => vec![ids.len(), shapes[0][1]],
        Op::GatherLast { group, .. } => {
            let mut s = shapes[0].to_vec();
            *s.last_mut().unwrap() = *group;
            s
        }
        Op::Sum | Op::Mean => vec![],
        Op::RmsNorm { .. } | Op::Rope { .. } | Op::Attention { .. } => shapes[0].to_vec(),
    }
}

// ---------------------------------------------------------------------------
// backward (generic: f32 for training, f64 for the gradient checker)
// ---------------------------------------------------------------------------

/// Per-input gradient contributions for one node, at any scalar width.
/// The f32 instantiation is the production backward; the f64 instantiation
/// runs the identical formulas for finite-difference validation, so the
/// checker is insensitive to f32 cancellation noise while still validating
/// exactly the code that training executes. `needs[i]` gates work for
/// inputs that cannot receive gradient (frozen or detached).
pub fn backward_generic<S: Real>(
    op: &Op,
    inputs: &[&[S]],
    shapes: &[&[usize]],
    output: &[S],
    grad_out: &[S],
    needs: &[bool],
) -> Vec<Option<Vec<S>>> {
    let go = grad_out;
    let mut grads: Vec<Option<Vec<S>>> = vec![None; inputs.len()];
    match op {
        Op::Leaf | Op::StopGradient => {}
        Op::Add => {
            for i in 0..2 {
                if needs[i] {
                    grads[i] = Some(go.to_vec());
                }
            }
        }
        Op::Mul => {
            for i in 0..2 {
                if needs[i] {
                    let other = inputs[1 - i];
                    grads[i] = Some(go.iter().zip(other).map(|(g, o)| g.mul(*o)).collect());
                }
            }
        }
        Op::Scale(c) => {
            if needs[0] {
                let c = S::from_f32(*c);
                grads[0] = Some(go.iter().map(|g| g.mul(c)).collect());
            }
        }
        Op::AddScalar(_) => {
            if needs[0] {
                grads[0] = Some(go.to_vec());
            }
        }
        Op::ClampMin(c) => {
            if needs[0] {
                let c = S::from_f32(*c);
                grads[0] = Some(
                    go.iter()
                        .zip(inputs[0])
                        .map(|(g, x)| if *x >= c { *g } else { S::ZERO })
                        .collect(),
                );
            }
        }
        Op::Exp => {
            if needs[0] {
                grads[0] = Some(go.iter().zip(output).map(|(g, y)| g.mul(*y)).collect());
            }
        }
        Op::Log => {
            if needs[0] {
                grads[0] = Some(go.iter().zip(inputs[0]).map(|(g, x)| g.div(*x)).collect());
            }
        }
        Op::Power(c) => {
            if needs[0] {
                let c = S::from_f32(*c);
                let cm1 = c.sub(S::ONE);
                grads[0] = Some(
                    go.iter()
                        .zip(inputs[0])
                        .map(|(g, x)| g.mul(c).mul(x.powf(cm1)))
                        .collect(),
                );
            }
        }
        Op::Silu => {
            if needs[0] {
                grads[0] = Some(
                    go.iter()
                        .zip(inputs[0])
                        .map(|(g, x)| {
                            let s = sigmoid(*x);
                            g.mul(s).mul(S::ONE.add(x.mul(S::ONE.sub(s))))
                        })
                        .collect(),
                );
            }
        }
        Op::Matmul => {
            let (m, k) = (shapes[0][0], shapes[0][1]);
            let n = shapes[1][1];
            if needs[0] {
                // dA = dC x B^T
                grads[0] = Some(k_matmul_nt(go, inputs[1], m, n, k));
            }
            if needs[1] {
                // dB = A^T x dC
                grads[1] = Some(k_matmul_tn(inputs[0], go, m, k, n));
            }
        }
        Op::Transpose => {
            if needs[0] {
                let (r, c) = (shapes[0][0], shapes[0][1]);
                let mut d = vec![S::ZERO; r * c];
                for i in 0..c {
                    for j in 0..r {
                        d[j * c + i] = go[i * r + j];
                    }
                }
                grads[0] = Some(d);
            }
        }
        Op::Reshape(_) => {
            if needs[0] {
                grads[0] = Some(go.to_vec());
            }
        }
        Op::SliceRows { start, len } => {
            if needs[0] {
                let row: usize = shapes[0][1..].iter().product();
                let mut d = vec![S::ZERO; inputs[0].len()];
                d[start * row..(start + len) * row].copy_from_slice(go);
                grads[0] = Some(d);
            }
        }
        Op::ConcatLast => {
            let la = *shapes[0].last().unwrap();
            let lb = *shapes[1].last().unwrap();
            let rows = inputs[0].len() / la;
            if needs[0] {
                let mut d = Vec::with_capacity(rows * la);
                for r in 0..rows {
                    d.extend_from_slice(&go[r * (la + lb)..r * (la + lb) + la]);
                }
                grads[0] = Some(d);
            }
            if needs[1] {
                let mut d = Vec::with_capacity(rows * lb);
                for r in 0..rows {
                    d.extend_from_slice(&go[r * (la + lb) + la..(r + 1) * (la + lb)]);
                }
                grads[1] = Some(d);
            }
        }
        Op::Embedding { ids } => {
            if needs[0] {
                let d = shapes[0][1];
                let mut acc = vec![S::ZERO; inputs[0].len()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut acc[id as usize * d..(id as usize + 1) * d];
                    let src = &go[r * d..(r + 1) * d];
                    for j in 0..d {
                        dst[j] = dst[j].add(src[j]);
                    }
                }
                grads[0] = Some(acc);
            }
        }
        Op::GatherLast { indices, group } => {
            if needs[0] {
                let v = *shapes[0].last().unwrap();
                let rows = inputs[0].len() / v;
                let mut acc = vec![S::ZERO; inputs[0].len()];
                for r in 0..rows {
                    for (gcol, &ix) in indices[r * group..(r + 1) * group].iter().enumerate() {
                        let slot = &mut acc[r * v + ix as usize];
                        *slot = slot.add(go[r * group + gcol]);
                    }
                }
                grads[0] = Some(acc);
            }
        }
        Op::Softmax { axis } => {
            if needs[0] {
                let (outer, len, inner) = lanes(shapes[0], *axis);
                let p = output;
                let mut d = vec![S::ZERO; p.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut s = S::ZERO;
                        for j in 0..len {
                            s = s.add(p[at(j)].mul(go[at(j)]));
                        }
                        for j in 0..len {
                            d[at(j)] = p[at(j)].mul(go[at(j)].sub(s));
                        }
                    }
                }
                grads[0] = Some(d);
            }
        }
        Op::LogSoftmax { axis } => {
            if needs[0] {
                let (outer, len, inner) = lanes(shapes[0], *axis);
                let y = output;
                let mut d = vec![S::ZERO; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut s = S::ZERO;
                        for j in 0..len {
                            s = s.add(go[at(j)]);
                        }
                        for j in 0..len {
                            d[at(j)] = go[at(j)].sub(y[at(j)].exp().mul(s));
                        }
                    }
                }
                grads[0] = Some(d);
            }
        }
        Op::Sum => {
            if needs[0] {
                grads[0] = Some(vec![go[0]; inputs[0].len()]);
            }
        }
        Op::Mean => {
            if needs[0] {
                let g = go[0].div(S::from_usize(inputs[0].len()));
                grads[0] = Some(vec![g; inputs[0].len()]);
            }
        }
        Op::RmsNorm { eps } => {
            let d = *shapes[0].last().unwrap();
            let rows = inputs[0].len() / d;
            let x = inputs[0];
            let gain = inputs[1];
            let eps = S::from_f32(*eps);
            let dn = S::from_usize(d);
            let mut dx = if needs[0] {
                vec![S::ZERO; x.len()]
            } else {
                Vec::new()
            };
            let mut dg = if needs[1] {
                vec![S::ZERO; d]
            } else {
                Vec::new()
            };
            for r in 0..rows {
                let xr = &x[r * d..(r + 1) * d];
                let gr = &go[r * d..(r + 1) * d];
                let ms = dot(xr, xr).div(dn);
                let inv = S::ONE.div(ms.add(eps).sqrt());
                if needs[1] {
                    for j in 0..d {
                        dg[j] = dg[j].add(xr[j].mul(inv).mul(gr[j]));
                    }
                }
                if needs[0] {
                    // u = gain .* dy; dx = inv*u - x * (u.x) * inv^3 / d
                    let mut ux = S::ZERO;
                    for j in 0..d {
                        ux = ux.add(gain[j].mul(gr[j]).mul(xr[j]));
                    }
                    let c = ux.mul(inv).mul(inv).mul(inv).div(dn);
                    let dxr = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        dxr[j] = gain[j].mul(gr[j]).mul(inv).sub(xr[j].mul(c));
                    }
                }
            }
            if needs[0] {
                grads[0] = Some(dx);
            }
            if needs[1] {
                grads[1] = Some(dg);
            }
        }
        Op::Rope { theta } => {
            if needs[0] {
                // Rotation is orthogonal: the gradient rotates by the
                // negated angle.
                let (t, h, d) = (shapes[0][0], shapes[0][1], shapes[0][2]);
                let half = d / 2;
                let theta = S::from_f32(*theta);
                let mut inv_freq = Vec::with_capacity(half);
                for i in 0..half {
                    let expo = S::from_usize(2 * i).div(S::from_usize(d));
                    inv_freq.push(S::ONE.div(theta.powf(expo)));
                }
                let mut dx = vec![S::ZERO; inputs[0].len()];
                for p in 0..t {
                    let pos = S::from_usize(p);
                    for hi in 0..h {
                        let base = (p * h + hi) * d;
                        for i in 0..half {
                            let ang = pos.mul(inv_freq[i]);
                            let (sin, cos) = (ang.sin(), ang.cos());
                            let ga = go[base + i];
                            let gb = go[base + half + i];
                            dx[base + i] = ga.mul(cos).add(gb.mul(sin));
                            dx[base + half + i] = gb.mul(cos).sub(ga.mul(sin));
                        }
                    }
                }
                grads[0] = Some(dx);
            }
        }
        Op::Attention {
            n_heads,
            n_kv_heads,
        } => {
            let (t, d) = (shapes[0][0], shapes[0][2]);
            let (h, hkv) = (*n_heads, *n_kv_heads);
            let group = h / hkv;
            let scale = S::ONE.div(S::from_usize(d).sqrt());
            let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
            let mut dq = vec![S::ZERO; q.len()];
            let mut dk = vec![S::ZERO; k.len()];
            let mut dv = vec![S::ZERO; v.len()];
            let mut probs = vec![S::ZERO; t];
            let mut dp = vec![S::ZERO; t];
            for hi in 0..h {
                let g = hi / group;
                for ti in 0..t {
                    let qrow = &q[(ti * h + hi) * d..][..d];
                    // recompute the softmax row (cheaper than stashing t^2
                    // probabilities per head during the forward pass)
                    let mut m = S::ZERO;
                    for s in 0..=ti {
                        let sc = dot(qrow, &k[(s * hkv + g) * d..][..d]).mul(scale);
                        probs[s] = sc;
                        m = if s == 0 { sc } else { m.max(sc) };
                    }
                    let mut z = S::ZERO;
                    for s in 0..=ti {
                        let e = probs[s].sub(m).exp();
                        probs[s] = e;
                        z = z.add(e);
                    }
                    for s in 0..=ti {
                        probs[s] = probs[s].div(z);
                    }
                    let grow = &go[(ti * h + hi) * d..][..d];
                    let mut pdsum = S::ZERO;
                    for s in 0..=ti {
                        let vrow = &v[(s * hkv + g) * d..][..d];
                        let dpv = dot(grow, vrow);
                        dp[s] = dpv;
                        pdsum = pdsum.add(probs[s].mul(dpv));
                    }
                    for s in 0..=ti {
                        let ds = probs[s].mul(dp[s].sub(pdsum)).mul(scale);
                        let krow = &k[(s * hkv + g) * d..][..d];
                        let dqrow = &mut dq[(ti * h + hi) * d..][..d];
                        for j in 0..d {
                            dqrow[j] = dqrow[j].add(ds.mul(krow[j]));
                        }
                        let dkrow = &mut dk[(s * hkv + g) * d..][..d];
                        for j in 0..d {
                            dkrow[j] = dkrow[j].add(ds.mul(qrow[j]));
                        }
                        let dvrow = &mut dv[(s * hkv + g) * d..][..d];
                        for j in 0..d {
                            dvrow[j] = dvrow[j].add(probs[s].mul(grow[j]));
                        }
                    }
                }
            }
            if needs[0] {
                grads[0] = Some(dq);
            }
            if needs[1] {
                grads[1] = Some(dk);
            }
            if needs[2] {
                grads[2] = Some(dv);
            }
        }
    }
    grads
}

/// f32 adapter used by `Graph::backward`.
pub fn backward_op(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    grad_out: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let slices: Vec<&[f32]> = inputs.iter().map(|t| t.data()).collect();
    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
    backward_generic::<f32>(op, &slices, &shapes, output.data(), grad_out.data(), needs)
        .into_iter()
        .zip(inputs)
        .map(|(opt, t)| opt.map(|d| Tensor::new(t.shape().to_vec(), d)))
        .collect()
}
