use rand::Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{Result, Tensor, TensorError};

/// Value written above the diagonal by [`Tape::causal_mask_fill`]. Finite so
/// that the no-NaN/Inf invariant holds; `exp` of it underflows to exactly 0.
pub const MASK_FILL: f32 = -1.0e9;

const LN_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f32,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        shared_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gelu {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        a: Var,
        mask: Vec<f32>,
    },
    CausalMask {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        // Per-position weight already divided by the total weight.
        weights: Vec<f32>,
    },
    Sum {
        a: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed ops. Nodes are appended as ops run, so every
/// node's inputs precede it and a reverse scan is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Rejects non-finite data.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, if backward has reached this node.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- ops ---------------------------------------------------------------

    /// Elementwise sum. `b` may broadcast when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_suffix("add", self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let mut out = av.data().to_vec();
        for chunk in out.chunks_exact_mut(bv.len()) {
            for (o, x) in chunk.iter_mut().zip(bv) {
                *o += x;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    /// Elementwise product, with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_suffix("mul", self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let mut out = av.data().to_vec();
        for chunk in out.chunks_exact_mut(bv.len()) {
            for (o, x) in chunk.iter_mut().zip(bv) {
                *o *= x;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let av = self.value(a);
        let out = av.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push("scale", value, Op::Scale { a, factor }, &[a])
    }

    /// `a[..., m, k] · b[k, n]` or batched `a[..., m, k] · b[..., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Like [`Tape::matmul`] with the last two axes of `b` swapped.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let name = if trans_b { "matmul_nt" } else { "matmul" };
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let mismatch = || TensorError::Dimension {
            op: name,
            detail: format!("cannot multiply {ash:?} by {bsh:?}"),
        };
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (bk, n) = if trans_b {
            (bsh[bsh.len() - 1], bsh[bsh.len() - 2])
        } else {
            (bsh[bsh.len() - 2], bsh[bsh.len() - 1])
        };
        if bk != k {
            return Err(mismatch());
        }
        let shared_b = bsh.len() == 2;
        if !shared_b && ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
            return Err(mismatch());
        }
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0f32; batch * m * n];
        if shared_b {
            if trans_b {
                gemm_nt(ad, bd, &mut out, batch * m, k, n);
            } else {
                gemm_nn(ad, bd, &mut out, batch * m, k, n);
            }
        } else {
            for bi in 0..batch {
                let a_s = &ad[bi * m * k..(bi + 1) * m * k];
                let b_s = &bd[bi * k * n..(bi + 1) * k * n];
                let o_s = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    gemm_nt(a_s, b_s, o_s, m, k, n);
                } else {
                    gemm_nn(a_s, b_s, o_s, m, k, n);
                }
            }
        }
        let mut shape = ash[..ash.len() - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        let op = Op::MatMul {
            a,
            b,
            trans_b,
            shared_b,
            batch,
            m,
            k,
            n,
        };
        self.push(name, value, op, &[a, b])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::Dimension {
                op: "permute",
                detail: format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            });
        }
        let out = permute_data(self.value(a).data(), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let value = Tensor::new(out_shape, out)?;
        self.push(
            "permute",
            value,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
        )
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let nd = self.shape(a).len();
        if d0 >= nd || d1 >= nd {
            return Err(TensorError::Dimension {
                op: "transpose",
                detail: format!("axes ({d0}, {d1}) out of range for rank {nd}"),
            });
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != av.numel() || shape.contains(&0) {
            return Err(TensorError::Dimension {
                op: "reshape",
                detail: format!("cannot view {:?} as {shape:?}", av.shape()),
            });
        }
        let value = Tensor::new(shape.to_vec(), av.data().to_vec())?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let Some(&d) = av.shape().last() else {
            return Err(TensorError::Dimension {
                op: "softmax",
                detail: "scalar has no last axis".into(),
            });
        };
        let mut out = av.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax { a }, &[a])
    }

    /// Normalizes over the last axis then applies `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap_or(&1);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::Dimension {
                op: "layer_norm",
                detail: format!(
                    "scale {:?} and shift {:?} must both be [{d}]",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            });
        }
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let rows = xv.numel() / d;
        let mut out = vec![0.0f32; xv.numel()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for (row, o) in xv.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mu = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                o[j] = (row[j] - mu) * rs * g[j] + bta[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        };
        self.push("layer_norm", value, op, &[x, gamma, beta])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = av
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push("gelu", value, Op::Gelu { a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push("relu", value, Op::Relu { a }, &[a])
    }

    /// Gathers rows of `table[V×d]`, giving `[ids.len() × d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let [v, d] = *tv.shape() else {
            return Err(TensorError::Dimension {
                op: "embedding",
                detail: format!("table must be 2-D, got {:?}", tv.shape()),
            });
        };
        if ids.is_empty() {
            return Err(TensorError::Dimension {
                op: "embedding",
                detail: "no ids to look up".into(),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push("embedding", value, op, &[table])
    }

    /// Inverted dropout. Identity when `p == 0` or `train` is false.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f32,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let av = self.value(a);
        let mask: Vec<f32> = (0..av.numel())
            .map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep_scale })
            .collect();
        let out = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push("dropout", value, Op::Dropout { a, mask }, &[a])
    }

    /// Overwrites entries strictly above the diagonal of the last two
    /// (square) axes with [`MASK_FILL`].
    pub fn causal_mask_fill(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let sh = av.shape();
        if sh.len() < 2 || sh[sh.len() - 1] != sh[sh.len() - 2] {
            return Err(TensorError::Dimension {
                op: "causal_mask_fill",
                detail: format!("last two axes must be square, got {sh:?}"),
            });
        }
        let t = sh[sh.len() - 1];
        let mut out = av.data().to_vec();
        for mat in out.chunks_exact_mut(t * t) {
            for i in 0..t {
                mat[i * t + i + 1..(i + 1) * t].fill(MASK_FILL);
            }
        }
        let value = Tensor::new(sh.to_vec(), out)?;
        self.push("causal_mask_fill", value, Op::CausalMask { a }, &[a])
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)` over
    /// positions whose `ignore` flag is false. Logits are `[..., V]` with one
    /// row per target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: &[bool]) -> Result<Var> {
        let weights: Vec<f32> = ignore.iter().map(|&ig| if ig { 0.0 } else { 1.0 }).collect();
        self.weighted_cross_entropy(logits, targets, &weights)
    }

    /// Weighted mean NLL: `Σ wᵢ·nllᵢ / Σ wᵢ`. Zero-weight positions are not
    /// range-checked.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f32],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let Some(&vocab) = lv.shape().last() else {
            return Err(TensorError::Dimension {
                op: "cross_entropy",
                detail: "logits must have a vocabulary axis".into(),
            });
        };
        let rows = lv.numel() / vocab;
        if targets.len() != rows || weights.len() != rows {
            return Err(TensorError::Dimension {
                op: "cross_entropy",
                detail: format!(
                    "logits {:?} give {rows} positions but {} targets and {} weights were given",
                    lv.shape(),
                    targets.len(),
                    weights.len()
                ),
            });
        }
        let total: f64 = weights.iter().map(|&w| w as f64).sum();
        if total <= 0.0 {
            return Err(TensorError::DegenerateBatch);
        }
        let mut acc = 0.0f64;
        for (i, row) in lv.data().chunks_exact(vocab).enumerate() {
            if weights[i] == 0.0 {
                continue;
            }
            let t = targets[i];
            if t >= vocab {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: vocab,
                });
            }
            acc += weights[i] as f64 * (log_sum_exp(row) - row[t]) as f64;
        }
        let loss = (acc / total) as f32;
        let normalized = weights.iter().map(|&w| (w as f64 / total) as f32).collect();
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: normalized,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        self.push("sum", Tensor::scalar(total as f32), Op::Sum { a }, &[a])
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates `dRoot/dNode` into every node that requires a gradient.
    /// Gradients from repeated calls add up until [`Tape::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0];
        if rv.value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.value.shape()
            )));
        }
        if !rv.requires_grad {
            return Err(TensorError::Contract(
                "backward root does not depend on any tensor that requires a gradient".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| {
                    for chunk in g.chunks_exact(gb.len()) {
                        add_into(gb, chunk);
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    for (gc, gac) in g.chunks_exact(bv.len()).zip(ga.chunks_exact_mut(bv.len())) {
                        for j in 0..bv.len() {
                            gac[j] += gc[j] * bv[j];
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (gc, ac) in g.chunks_exact(bv.len()).zip(av.chunks_exact(bv.len())) {
                        for j in 0..bv.len() {
                            gb[j] += gc[j] * ac[j];
                        }
                    }
                });
            }
            Op::Scale { a, factor } => {
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * factor)
                });
            }
            &Op::MatMul {
                a,
                b,
                trans_b,
                shared_b,
                batch,
                m,
                k,
                n,
            } => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                // dA = dC·Bᵀ (or dC·B when B was transposed)
                self.accumulate(grads, a, |ga| {
                    for bi in 0..batch {
                        let b_s = if shared_b {
                            bd
                        } else {
                            &bd[bi * k * n..(bi + 1) * k * n]
                        };
                        let g_s = &g[bi * m * n..(bi + 1) * m * n];
                        let ga_s = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            gemm_nn(g_s, b_s, ga_s, m, n, k);
                        } else {
                            gemm_nt(g_s, b_s, ga_s, m, n, k);
                        }
                    }
                });
                // dB = Aᵀ·dC (or dCᵀ·A when B was transposed)
                self.accumulate(grads, b, |gb| {
                    if shared_b {
                        if trans_b {
                            gemm_tn(g, ad, gb, batch * m, n, k);
                        } else {
                            gemm_tn(ad, g, gb, batch * m, k, n);
                        }
                    } else {
                        for bi in 0..batch {
                            let a_s = &ad[bi * m * k..(bi + 1) * m * k];
                            let g_s = &g[bi * m * n..(bi + 1) * m * n];
                            let gb_s = &mut gb[bi * k * n..(bi + 1) * k * n];
                            if trans_b {
                                gemm_tn(g_s, a_s, gb_s, m, n, k);
                            } else {
                                gemm_tn(a_s, g_s, gb_s, m, k, n);
                            }
                        }
                    }
                });
            }
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                self.accumulate(grads, *a, |ga| add_into(ga, &back));
            }
            Op::Reshape { a } => self.accumulate(grads, *a, |ga| add_into(ga, g)),
            Op::Softmax { a } => {
                let y = node.value.data();
                let d = *node.value.shape().last().expect("softmax output has an axis");
                self.accumulate(grads, *a, |ga| {
                    for ((yr, gr), gar) in y
                        .chunks_exact(d)
                        .zip(g.chunks_exact(d))
                        .zip(ga.chunks_exact_mut(d))
                    {
                        let s: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..d {
                            gar[j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let xhat: Vec<f32> = xv
                    .chunks_exact(d)
                    .zip(mean.iter().zip(rstd))
                    .flat_map(|(row, (&mu, &rs))| row.iter().map(move |v| (v - mu) * rs))
                    .collect();
                self.accumulate(grads, *gamma, |gg| {
                    for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for gr in g.chunks_exact(d) {
                        add_into(gb, gr);
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let mut dxhat = vec![0.0f32; d];
                    for (r, ((gr, xr), gxr)) in g
                        .chunks_exact(d)
                        .zip(xhat.chunks_exact(d))
                        .zip(gx.chunks_exact_mut(d))
                        .enumerate()
                    {
                        let mut mean_dx = 0.0f32;
                        let mut mean_dx_x = 0.0f32;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gam[j];
                            mean_dx += dxhat[j];
                            mean_dx_x += dxhat[j] * xr[j];
                        }
                        mean_dx /= d as f32;
                        mean_dx_x /= d as f32;
                        for j in 0..d {
                            gxr[j] += rstd[r] * (dxhat[j] - mean_dx - xr[j] * mean_dx_x);
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((gi, &x), gai) in g.iter().zip(av).zip(ga.iter_mut()) {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *gai += gi * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                });
            }
            Op::Relu { a } => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((gi, &x), gai) in g.iter().zip(av).zip(ga.iter_mut()) {
                        if x > 0.0 {
                            *gai += gi;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                self.accumulate(grads, *table, |gt| {
                    for (row, &id) in g.chunks_exact(d).zip(ids) {
                        add_into(&mut gt[id * d..(id + 1) * d], row);
                    }
                });
            }
            Op::Dropout { a, mask } => {
                self.accumulate(grads, *a, |ga| {
                    for ((gai, gi), m) in ga.iter_mut().zip(g).zip(mask) {
                        *gai += gi * m;
                    }
                });
            }
            Op::CausalMask { a } => {
                let sh = node.value.shape();
                let t = sh[sh.len() - 1];
                self.accumulate(grads, *a, |ga| {
                    for (gm, gam) in g.chunks_exact(t * t).zip(ga.chunks_exact_mut(t * t)) {
                        for i in 0..t {
                            add_into(&mut gam[i * t..i * t + i + 1], &gm[i * t..i * t + i + 1]);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let lv = self.value(*logits);
                let vocab = *lv.shape().last().expect("logits have a vocabulary axis");
                let upstream = g[0];
                self.accumulate(grads, *logits, |gl| {
                    let mut probs = vec![0.0f32; vocab];
                    for (i, (row, glr)) in lv
                        .data()
                        .chunks_exact(vocab)
                        .zip(gl.chunks_exact_mut(vocab))
                        .enumerate()
                    {
                        let w = weights[i];
                        if w == 0.0 {
                            continue;
                        }
                        probs.copy_from_slice(row);
                        softmax_in_place(&mut probs);
                        probs[targets[i]] -= 1.0;
                        let s = upstream * w;
                        for j in 0..vocab {
                            glr[j] += s * probs[j];
                        }
                    }
                });
            }
            Op::Sum { a } => {
                let s = g[0];
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += s));
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        f(grads[v.0].get_or_insert_with(|| vec![0.0; numel]));
    }
}

fn check_suffix(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(())
    } else {
        Err(TensorError::Dimension {
            op,
            detail: format!("{b:?} does not broadcast against {a:?}"),
        })
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0f32;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    let inv = 1.0 / total;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

pub(crate) fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let total: f32 = row.iter().map(|x| (x - max).exp()).sum();
    max + total.ln()
}

/// Strided copy realizing an axis permutation of row-major `data`.
fn permute_data(data: &[f32], shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let nd = shape.len();
    if nd == 0 || perm.iter().enumerate().all(|(i, &p)| i == p) {
        return data.to_vec();
    }
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let inner = out_shape[nd - 1];
    let inner_stride = strides[nd - 1];
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd - 1];
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        // odometer increment over the outer axes
        let mut axis = nd - 1;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}
