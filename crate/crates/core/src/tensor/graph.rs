//! Wengert tape. Ops append nodes; `backward` seeds the loss with 1 and
//! walks the tape in reverse, accumulating into each node's grad buffer.
//! Repeated `backward` calls therefore add up: calling twice on the same
//! loss doubles every leaf gradient.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tensor::LAYER_NORM_EPS;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    Matmul(usize, usize),
    /// a · bᵀ — used for tied output projections.
    MatmulTransB(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    /// Summed token NLL over non-pad rows; row count is tracked separately so
    /// callers can turn the sum into a mean.
    CrossEntropySum {
        logits: usize,
        targets: Vec<usize>,
        pad: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Sum(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    /// out[i, j] = x[i, j] * s[i]
    ScaleRows {
        x: usize,
        s: usize,
    },
    /// out[i] = Σ_j x[i, j] * w[j]
    DotRows {
        x: usize,
        w: usize,
    },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(data.len(), numel(&shape));
        self.nodes.push(Node {
            data,
            shape,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Var {
        assert_eq!(data.len(), numel(shape), "leaf data does not match shape");
        self.push(data, shape.to_vec(), Op::Leaf, requires_grad)
    }

    /// Leaf that never receives gradient (masks, position ids, constants).
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Var {
        self.leaf(data, shape, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        assert_eq!(self.nodes[v.0].data.len(), 1, "scalar() on non-scalar");
        self.nodes[v.0].data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip2(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(data, self.nodes[a.0].shape.clone(), Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip2(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(data, self.nodes[a.0].shape.clone(), Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip2(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(data, self.nodes[a.0].shape.clone(), Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.needs(x);
        self.push(data, self.nodes[x.0].shape.clone(), Op::Scale(x.0, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let rg = self.needs(x);
        self.push(data, self.nodes[x.0].shape.clone(), Op::Relu(x.0), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.needs(x);
        self.push(data, self.nodes[x.0].shape.clone(), Op::Sigmoid(x.0), rg)
    }

    /// Broadcast-add a bias row to every row of a 2-D input.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims2("add_bias", x)?;
        if self.shape(b) != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                detail: format!("x {:?} vs bias {:?}", self.shape(x), self.shape(b)),
            });
        }
        let xv = self.value(x);
        let bv = self.value(b);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(xv[i * c + j] + bv[j]);
            }
        }
        let rg = self.needs(x) || self.needs(b);
        Ok(self.push(data, vec![r, c], Op::AddBias(x.0, b.0), rg))
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data = mm(self.value(a), self.value(b), m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![m, n], Op::Matmul(a.0, b.0), rg))
    }

    /// a[m,k] · b[n,k]ᵀ → [m,n].
    pub fn matmul_transb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_transb", a)?;
        let (n, k2) = self.dims2("matmul_transb", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_transb",
                detail: format!("{:?} x {:?}ᵀ", self.shape(a), self.shape(b)),
            });
        }
        let data = mm_tb(self.value(a), self.value(b), m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![m, n], Op::MatmulTransB(a.0, b.0), rg))
    }

    // ---- normalization and attention pieces ----

    /// Numerically stable softmax along `axis`. Max subtraction keeps
    /// `exp` in range; fully masked lanes are the caller's problem.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.nodes[x.0].shape.clone();
        assert!(axis < shape.len(), "softmax axis out of range");
        let mut data = self.value(x).to_vec();
        for lane in lanes(&shape, axis) {
            let mut max = f64::NEG_INFINITY;
            for &i in &lane {
                max = max.max(data[i]);
            }
            let mut sum = 0.0;
            for &i in &lane {
                let e = (data[i] - max).exp();
                data[i] = e;
                sum += e;
            }
            for &i in &lane {
                data[i] /= sum;
            }
        }
        let rg = self.needs(x);
        self.push(data, shape, Op::Softmax { x: x.0, axis }, rg)
    }

    /// Per-row layer normalization over the last axis with learned gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2("layer_norm", x)?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            });
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                data.push((row[j] - mean) * inv * gv[j] + bv[j]);
            }
        }
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            data,
            vec![r, c],
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
            rg,
        ))
    }

    // ---- lookup and loss ----

    /// Gather rows of `table` by id. Repeated ids scatter-add on backward.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TargetOutOfRange { id: bad, vocab: v });
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.needs(table);
        Ok(self.push(
            data,
            vec![ids.len(), d],
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Sum over non-pad rows of `-log softmax(logits)[target]`, returned with
    /// the non-pad row count. Mean loss is `scale(sum, 1/count)`.
    pub fn cross_entropy_sum(
        &mut self,
        logits: Var,
        targets: &[usize],
        pad: usize,
    ) -> Result<(Var, usize)> {
        let (r, v) = self.dims2("cross_entropy", logits)?;
        if targets.len() != r {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{} targets for {} rows", targets.len(), r),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != pad && t >= v) {
            return Err(Error::TargetOutOfRange { id: bad, vocab: v });
        }
        let lv = self.value(logits);
        let mut sum = 0.0;
        let mut count = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t == pad {
                continue;
            }
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            sum += lse - row[t];
            count += 1;
        }
        let rg = self.needs(logits);
        let var = self.push(
            vec![sum],
            vec![1],
            Op::CrossEntropySum {
                logits: logits.0,
                targets: targets.to_vec(),
                pad,
            },
            rg,
        );
        Ok((var, count))
    }

    /// Inverted dropout. `p == 0` is the identity (returns `x` itself);
    /// survivors are scaled by 1/(1-p) so expectations match eval mode.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut ChaCha12Rng) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0, 1)");
        if p == 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = self
            .value(x)
            .iter()
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / keep })
            .collect();
        let data = zip2(self.value(x), &mask, |v, m| v * m);
        let rg = self.needs(x);
        self.push(
            data,
            self.nodes[x.0].shape.clone(),
            Op::Dropout { x: x.0, mask },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.needs(x);
        self.push(vec![s], vec![1], Op::Sum(x.0), rg)
    }

    // ---- reshaping along rows/columns ----

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.dims2("concat_rows", parts[0])?.1;
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims2("concat_rows", p)?;
            if pc != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column counts differ: {} vs {}", c, pc),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            data,
            vec![rows, c],
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let r = self.dims2("concat_cols", parts[0])?.0;
        let mut cols = 0;
        for &p in parts {
            let (pr, c) = self.dims2("concat_cols", p)?;
            if pr != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts differ: {} vs {}", r, pr),
                });
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let c = self.shape(p)[1];
                let pv = self.value(p);
                data.extend_from_slice(&pv[i * c..(i + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            data,
            vec![r, cols],
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if start + len > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("slice {}..{} of {} columns", start, start + len, c),
            });
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let rg = self.needs(x);
        Ok(self.push(
            data,
            vec![r, len],
            Op::SliceCols {
                x: x.0,
                start,
                len,
            },
            rg,
        ))
    }

    /// Scale row i of a 2-D input by s[i].
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims2("scale_rows", x)?;
        if self.shape(s) != [r] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                detail: format!("x {:?} vs scales {:?}", self.shape(x), self.shape(s)),
            });
        }
        let xv = self.value(x);
        let sv = self.value(s);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(xv[i * c + j] * sv[i]);
            }
        }
        let rg = self.needs(x) || self.needs(s);
        Ok(self.push(data, vec![r, c], Op::ScaleRows { x: x.0, s: s.0 }, rg))
    }

    /// Dot each row of a 2-D input with a weight vector: out[i] = x[i,·]·w.
    pub fn dot_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (r, c) = self.dims2("dot_rows", x)?;
        if self.shape(w) != [c] {
            return Err(Error::ShapeMismatch {
                op: "dot_rows",
                detail: format!("x {:?} vs weights {:?}", self.shape(x), self.shape(w)),
            });
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let data = (0..r)
            .map(|i| {
                let row = &xv[i * c..(i + 1) * c];
                row.iter().zip(wv).map(|(a, b)| a * b).sum()
            })
            .collect();
        let rg = self.needs(x) || self.needs(w);
        Ok(self.push(data, vec![r], Op::DotRows { x: x.0, w: w.0 }, rg))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Gradients accumulate into nodes, so
    /// running this twice doubles them; leaves created with
    /// `requires_grad = false` stay untouched.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss {
                numel: self.nodes[loss.0].data.len(),
            });
        }
        let n = self.nodes.len();
        // Scratch adjoints for this sweep only; merged into node grads at the
        // end so accumulation across sweeps stays exact.
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut adj);
            match &mut self.nodes[i].grad {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                None => self.nodes[i].grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        // Route the node's adjoint to its inputs.
        let add_to = |adj: &mut [Option<Vec<f64>>], nodes: &[Node], idx: usize, contrib: &[f64]| {
            if !nodes[idx].requires_grad {
                return;
            }
            match &mut adj[idx] {
                Some(buf) => {
                    for (b, &v) in buf.iter_mut().zip(contrib) {
                        *b += v;
                    }
                }
                None => adj[idx] = Some(contrib.to_vec()),
            }
        };
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(adj, nodes, *a, g);
                add_to(adj, nodes, *b, g);
            }
            Op::Sub(a, b) => {
                add_to(adj, nodes, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                add_to(adj, nodes, *b, &neg);
            }
            Op::Mul(a, b) => {
                let da = zip2(g, &nodes[*b].data, |g, b| g * b);
                let db = zip2(g, &nodes[*a].data, |g, a| g * a);
                add_to(adj, nodes, *a, &da);
                add_to(adj, nodes, *b, &db);
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                add_to(adj, nodes, *x, &dx);
            }
            Op::AddBias(x, b) => {
                add_to(adj, nodes, *x, g);
                let c = nodes[*b].data.len();
                let mut db = vec![0.0; c];
                for (k, &v) in g.iter().enumerate() {
                    db[k % c] += v;
                }
                add_to(adj, nodes, *b, &db);
            }
            Op::Matmul(a, b) => {
                let (m, k) = dims2_of(&nodes[*a].shape);
                let n = nodes[*b].shape[1];
                // dA = G · Bᵀ, dB = Aᵀ · G
                let da = mm_tb(g, &nodes[*b].data, m, n, k);
                let db = mm_ta(&nodes[*a].data, g, m, k, n);
                add_to(adj, nodes, *a, &da);
                add_to(adj, nodes, *b, &db);
            }
            Op::MatmulTransB(a, b) => {
                let (m, k) = dims2_of(&nodes[*a].shape);
                let n = nodes[*b].shape[0];
                // out = A · Bᵀ ⇒ dA = G · B, dB = Gᵀ · A
                let da = mm(g, &nodes[*b].data, m, n, k);
                let db = mm_ta(g, &nodes[*a].data, m, n, k);
                add_to(adj, nodes, *a, &da);
                add_to(adj, nodes, *b, &db);
            }
            Op::Relu(x) => {
                let dx = zip2(g, &nodes[*x].data, |g, x| if x > 0.0 { g } else { 0.0 });
                add_to(adj, nodes, *x, &dx);
            }
            Op::Sigmoid(x) => {
                let dx = zip2(g, &nodes[i].data, |g, y| g * y * (1.0 - y));
                add_to(adj, nodes, *x, &dx);
            }
            Op::Softmax { x, axis } => {
                let y = &nodes[i].data;
                let mut dx = vec![0.0; y.len()];
                for lane in lanes(&nodes[i].shape, *axis) {
                    let dot: f64 = lane.iter().map(|&k| g[k] * y[k]).sum();
                    for &k in &lane {
                        dx[k] = y[k] * (g[k] - dot);
                    }
                }
                add_to(adj, nodes, *x, &dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (r, c) = dims2_of(&nodes[*x].shape);
                let xv = &nodes[*x].data;
                let gv = &nodes[*gain].data;
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for row in 0..r {
                    let xr = &xv[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let mean = xr.iter().sum::<f64>() / c as f64;
                    let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    // xhat_j = (x_j - mean) * inv
                    let mut dxhat = vec![0.0; c];
                    let mut dxhat_mean = 0.0;
                    let mut dxhat_xhat_mean = 0.0;
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * inv;
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                        let d = gr[j] * gv[j];
                        dxhat[j] = d;
                        dxhat_mean += d;
                        dxhat_xhat_mean += d * xhat;
                    }
                    dxhat_mean /= c as f64;
                    dxhat_xhat_mean /= c as f64;
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * inv;
                        dx[row * c + j] = inv * (dxhat[j] - dxhat_mean - xhat * dxhat_xhat_mean);
                    }
                }
                add_to(adj, nodes, *x, &dx);
                add_to(adj, nodes, *gain, &dgain);
                add_to(adj, nodes, *bias, &dbias);
            }
            Op::Embedding { table, ids } => {
                let d = nodes[*table].shape[1];
                let mut dt = vec![0.0; nodes[*table].data.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[row * d + j];
                    }
                }
                add_to(adj, nodes, *table, &dt);
            }
            Op::CrossEntropySum {
                logits,
                targets,
                pad,
            } => {
                let (r, v) = dims2_of(&nodes[*logits].shape);
                let lv = &nodes[*logits].data;
                let mut dl = vec![0.0; r * v];
                let gs = g[0];
                for (row, &t) in targets.iter().enumerate() {
                    if t == *pad {
                        continue;
                    }
                    let xr = &lv[row * v..(row + 1) * v];
                    let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = xr.iter().map(|x| (x - max).exp()).sum();
                    for j in 0..v {
                        let p = (xr[j] - max).exp() / denom;
                        dl[row * v + j] = gs * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                add_to(adj, nodes, *logits, &dl);
            }
            Op::Dropout { x, mask } => {
                let dx = zip2(g, mask, |g, m| g * m);
                add_to(adj, nodes, *x, &dx);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; nodes[*x].data.len()];
                add_to(adj, nodes, *x, &dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p].data.len();
                    add_to(adj, nodes, p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let r = nodes[i].shape[0];
                let total = nodes[i].shape[1];
                let mut start = 0;
                for &p in parts {
                    let c = nodes[p].shape[1];
                    if nodes[p].requires_grad {
                        let mut dp = Vec::with_capacity(r * c);
                        for row in 0..r {
                            dp.extend_from_slice(&g[row * total + start..row * total + start + c]);
                        }
                        add_to(adj, nodes, p, &dp);
                    }
                    start += c;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = dims2_of(&nodes[*x].shape);
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    for j in 0..*len {
                        dx[row * c + start + j] = g[row * len + j];
                    }
                }
                add_to(adj, nodes, *x, &dx);
            }
            Op::ScaleRows { x, s } => {
                let (r, c) = dims2_of(&nodes[*x].shape);
                let xv = &nodes[*x].data;
                let sv = &nodes[*s].data;
                let mut dx = vec![0.0; r * c];
                let mut ds = vec![0.0; r];
                for row in 0..r {
                    for j in 0..c {
                        let k = row * c + j;
                        dx[k] = g[k] * sv[row];
                        ds[row] += g[k] * xv[k];
                    }
                }
                add_to(adj, nodes, *x, &dx);
                add_to(adj, nodes, *s, &ds);
            }
            Op::DotRows { x, w } => {
                let (r, c) = dims2_of(&nodes[*x].shape);
                let xv = &nodes[*x].data;
                let wv = &nodes[*w].data;
                let mut dx = vec![0.0; r * c];
                let mut dw = vec![0.0; c];
                for row in 0..r {
                    for j in 0..c {
                        dx[row * c + j] = g[row] * wv[j];
                        dw[j] += g[row] * xv[row * c + j];
                    }
                }
                add_to(adj, nodes, *x, &dx);
                add_to(adj, nodes, *w, &dw);
            }
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("expected 2-D, got {:?}", s),
            });
        }
        Ok((s[0], s[1]))
    }
}

fn dims2_of(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip2(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Index sets along `axis` for every fixed setting of the other axes.
fn lanes(shape: &[usize], axis: usize) -> Vec<Vec<usize>> {
    let len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = Vec::with_capacity(outer * stride);
    for o in 0..outer {
        for s in 0..stride {
            let base = o * len * stride + s;
            out.push((0..len).map(|k| base + k * stride).collect());
        }
    }
    out
}

/// c[m,n] = a[m,k] · b[k,n]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// c[m,n] = a[m,k] · b[n,k]ᵀ
fn mm_tb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// c[k,n] = a[m,k]ᵀ · b[m,n]
fn mm_ta(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for l in 0..m {
        let arow = &a[l * k..(l + 1) * k];
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..k {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check;

    /// Central differences at eps 1e-5 are good to ~1e-10 on smooth ops;
    /// 1e-6 leaves two orders of headroom without hiding real bugs.
    const FD_EPS: f64 = 1e-5;
    const FD_TOL: f64 = 1e-6;

    #[test]
    fn matmul_identity_preserves_input() {
        let mut g = Graph::new();
        let a = g.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], true);
        let eye = g.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let out = g.matmul(a, eye).unwrap();
        assert_eq!(g.value(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut g = Graph::new();
        let a = g.leaf(vec![1.0, 2.0], &[1, 2], true);
        let b = g.leaf(vec![3.0, 4.0], &[2, 1], true);
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(out), &[1, 1]);
        assert_eq!(g.value(out), &[11.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch_is_error() {
        let mut g = Graph::new();
        let a = g.leaf(vec![0.0; 6], &[2, 3], true);
        let b = g.leaf(vec![0.0; 8], &[2, 4], true);
        assert!(matches!(
            g.matmul(a, b),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_transb_matches_explicit_transpose() {
        let a = vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.75];
        let b = vec![1.5, 0.5, -2.0, 1.0, 0.0, -1.0, 2.5, 0.5];
        // b is [4, 2]; build bt = [2, 4] by hand and compare products.
        let mut bt = vec![0.0; 8];
        for i in 0..4 {
            for j in 0..2 {
                bt[j * 4 + i] = b[i * 2 + j];
            }
        }
        let mut g = Graph::new();
        let av = g.leaf(a.clone(), &[3, 2], true);
        let bv = g.leaf(b, &[4, 2], true);
        let btv = g.leaf(bt, &[2, 4], true);
        let via_tb = g.matmul_transb(av, bv).unwrap();
        let via_mm = g.matmul(av, btv).unwrap();
        assert_eq!(g.value(via_tb), g.value(via_mm));
    }

    /// End-to-end finite-difference check through a small chain of the core
    /// ops: matmul, bias, relu, layer norm, softmax, and a scalar reduction.
    #[test]
    fn finite_differences_agree_through_op_chain() {
        let a0 = vec![0.3, -0.7, 1.1, 0.9, -0.2, 0.5];
        let w0 = vec![0.4, -0.3, 0.8, 0.1, -0.6, 0.2, 0.05, 0.7, -0.9];
        // keep every relu preactivation well away from the kink at zero,
        // or central differences straddle it and the check lies
        let b0 = vec![0.1, -0.25, 0.3];
        let gain0 = vec![1.1, 0.9, 1.0];
        let bias0 = vec![0.0, 0.1, -0.1];

        let run = |a: &[f64], w: &[f64], b: &[f64], gain: &[f64], bias: &[f64]| {
            let mut g = Graph::new();
            let av = g.leaf(a.to_vec(), &[2, 3], true);
            let wv = g.leaf(w.to_vec(), &[3, 3], true);
            let bv = g.leaf(b.to_vec(), &[3], true);
            let gv = g.leaf(gain.to_vec(), &[3], true);
            let biasv = g.leaf(bias.to_vec(), &[3], true);
            let h = g.matmul(av, wv).unwrap();
            let h = g.add_bias(h, bv).unwrap();
            let h = g.relu(h);
            let h = g.layer_norm(h, gv, biasv).unwrap();
            let h = g.softmax(h, 1);
            let loss = g.sum(h);
            // softmax rows sum to 1, so weight the rows to get nonzero grads
            let weights = g.constant(vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.5], &[2, 3]);
            let mut g2 = g;
            let weighted = g2.mul(h, weights).unwrap();
            let loss2 = g2.sum(weighted);
            let both = g2.add(loss, loss2).unwrap();
            g2.backward(both).unwrap();
            (
                g2.scalar(both),
                [av, wv, bv, gv, biasv].map(|v| g2.grad(v).unwrap().to_vec()),
            )
        };

        let (_, grads) = run(&a0, &w0, &b0, &gain0, &bias0);
        let params: [&[f64]; 5] = [&a0, &w0, &b0, &gain0, &bias0];
        for (idx, (x, analytic)) in params.iter().zip(&grads).enumerate() {
            let err = grad_check(
                |xs| {
                    let mut p: Vec<&[f64]> = params.to_vec();
                    p[idx] = xs;
                    run(p[0], p[1], p[2], p[3], p[4]).0
                },
                x,
                analytic,
                FD_EPS,
            );
            assert!(err < FD_TOL, "param {idx}: fd error {err}");
        }
    }

    #[test]
    fn softmax_handles_extreme_logits() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1000.0, 0.0], &[1, 2], true);
        let y = g.softmax(x, 1);
        let v = g.value(y);
        assert!(v.iter().all(|p| p.is_finite()));
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn softmax_of_mask_blocked_column_is_exactly_zero() {
        let mut g = Graph::new();
        let x = g.leaf(vec![0.2, 0.2 + crate::tensor::ATTN_MASK_NEG, 0.7], &[1, 3], true);
        let y = g.softmax(x, 1);
        assert_eq!(g.value(y)[1], 0.0);
        let s: f64 = g.value(y).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_axis0_normalizes_columns() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 5.0, 2.0, -1.0, 0.0, 3.0], &[2, 3], true);
        let y = g.softmax(x, 0);
        let v = g.value(y);
        for col in 0..3 {
            let s = v[col] + v[3 + col];
            assert!((s - 1.0).abs() < 1e-12, "column {col} sums to {s}");
        }
    }

    #[test]
    fn layer_norm_zero_variance_row_yields_bias() {
        let mut g = Graph::new();
        let x = g.leaf(vec![5.0, 5.0, 5.0], &[1, 3], true);
        let gain = g.leaf(vec![2.0, 3.0, 4.0], &[3], true);
        let bias = g.leaf(vec![0.5, -0.5, 1.5], &[3], true);
        let y = g.layer_norm(x, gain, bias).unwrap();
        // (x - mean) is exactly zero, so the output is the bias, exactly.
        assert_eq!(g.value(y), &[0.5, -0.5, 1.5]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_vocab() {
        let mut g = Graph::new();
        let logits = g.leaf(vec![0.7; 3 * 7], &[3, 7], true);
        let (sum, count) = g.cross_entropy_sum(logits, &[2, 6, 0], 9999).unwrap();
        assert_eq!(count, 3);
        let per_row = g.scalar(sum) / 3.0;
        assert!((per_row - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_skips_pad_rows() {
        let pad = 0usize;
        let mut g = Graph::new();
        let logits = g.leaf(vec![0.1, 0.9, -0.3, 0.4, 0.2, 0.0], &[3, 2], true);
        let (sum, count) = g.cross_entropy_sum(logits, &[1, pad, 1], pad).unwrap();
        assert_eq!(count, 2);
        g.backward(sum).unwrap();
        let dl = g.grad(logits).unwrap();
        // pad row contributes nothing, forward or backward
        assert_eq!(&dl[2..4], &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_target_out_of_range_is_error() {
        let mut g = Graph::new();
        let logits = g.leaf(vec![0.0; 4], &[2, 2], true);
        assert!(matches!(
            g.cross_entropy_sum(logits, &[1, 2], 9999),
            Err(Error::TargetOutOfRange { id: 2, vocab: 2 })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let x0 = vec![0.2, -1.3, 0.8, 1.9, -0.4, 0.0, 0.6, -0.9];
        let targets = [3usize, 1];
        let run = |x: &[f64]| {
            let mut g = Graph::new();
            let logits = g.leaf(x.to_vec(), &[2, 4], true);
            let (sum, count) = g.cross_entropy_sum(logits, &targets, 9999).unwrap();
            let mean = g.scale(sum, 1.0 / count as f64);
            (g, logits, mean)
        };
        let (mut g, logits, mean) = run(&x0);
        g.backward(mean).unwrap();
        let analytic = g.grad(logits).unwrap().to_vec();
        let err = grad_check(
            |x| {
                let (g, _, mean) = run(x);
                g.scalar(mean)
            },
            &x0,
            &analytic,
            FD_EPS,
        );
        assert!(err < FD_TOL, "fd error {err}");
    }

    #[test]
    fn embedding_repeated_ids_accumulate_gradient() {
        let mut g = Graph::new();
        let table = g.leaf(vec![0.0; 3 * 2], &[3, 2], true);
        let e = g.embedding(table, &[0, 0, 1]).unwrap();
        let loss = g.sum(e);
        g.backward(loss).unwrap();
        let dt = g.grad(table).unwrap();
        assert_eq!(dt, &[2.0, 2.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn embedding_id_out_of_range_is_error() {
        let mut g = Graph::new();
        let table = g.leaf(vec![0.0; 4], &[2, 2], true);
        assert!(g.embedding(table, &[0, 2]).is_err());
    }

    #[test]
    fn backward_twice_accumulates_exactly_double() {
        let mut g = Graph::new();
        let x = g.leaf(vec![0.4, -1.2, 2.2], &[1, 3], true);
        let y = g.softmax(x, 1);
        let w = g.constant(vec![3.0, 1.0, -2.0], &[1, 3]);
        let m = g.mul(y, w).unwrap();
        let loss = g.sum(m);
        g.backward(loss).unwrap();
        let once = g.grad(x).unwrap().to_vec();
        g.backward(loss).unwrap();
        let twice = g.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut rng = crate::rng::derive(7, &[1]);
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], &[1, 2], true);
        let y = g.dropout(x, 0.0, &mut rng);
        assert_eq!(x, y, "p=0 must not even allocate a node");
    }

    #[test]
    fn dropout_is_seed_deterministic_and_rescales() {
        let sample = |seed: u64| {
            let mut rng = crate::rng::derive(seed, &[42]);
            let mut g = Graph::new();
            let x = g.leaf(vec![1.0; 1000], &[10, 100], true);
            let y = g.dropout(x, 0.25, &mut rng);
            g.value(y).to_vec()
        };
        let a = sample(3);
        let b = sample(3);
        assert_eq!(a, b);
        let c = sample(4);
        assert_ne!(a, c);
        // survivors carry 1/(1-p); the kept fraction should be near 75%
        let kept = a.iter().filter(|&&v| v != 0.0).count();
        assert!(a.iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12));
        assert!((650..=850).contains(&kept), "kept {kept} of 1000");
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        let mut g = Graph::new();
        let x = g.leaf(vec![-1000.0, 0.0, 1000.0], &[1, 3], true);
        let y = g.sigmoid(x);
        let v = g.value(y);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 0.5);
        assert_eq!(v[2], 1.0);
    }

    #[test]
    fn slice_of_concat_cols_recovers_parts() {
        let mut g = Graph::new();
        let a = g.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], true);
        let b = g.leaf(vec![5.0, 6.0], &[2, 1], true);
        let cat = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(cat), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let a2 = g.slice_cols(cat, 0, 2).unwrap();
        let b2 = g.slice_cols(cat, 2, 1).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
    }

    #[test]
    fn concat_rows_stacks_and_routes_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(vec![1.0, 2.0], &[1, 2], true);
        let b = g.leaf(vec![3.0, 4.0, 5.0, 6.0], &[2, 2], true);
        let cat = g.concat_rows(&[a, b]).unwrap();
        assert_eq!(g.shape(cat), &[3, 2]);
        let w = g.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let m = g.mul(cat, w).unwrap();
        let loss = g.sum(m);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 2.0]);
        assert_eq!(g.grad(b).unwrap(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn gate_combination_gradients_match_finite_differences() {
        // scale_rows + dot_rows + sigmoid + sub: the exact composition the
        // decoder's gate controller uses.
        let hk0 = vec![0.5, -0.3, 0.8, 0.2, 1.1, -0.7, 0.05, 0.4];
        let hc0 = vec![-0.2, 0.9, 0.3, -0.5, 0.6, 0.1, -0.8, 0.7];
        let w0 = vec![0.3, -0.4, 0.26, 0.15, -0.9, 0.7, 0.2, -0.1];
        let run = |hk: &[f64], hc: &[f64], w: &[f64]| {
            let mut g = Graph::new();
            let hkv = g.leaf(hk.to_vec(), &[2, 4], true);
            let hcv = g.leaf(hc.to_vec(), &[2, 4], true);
            let wv = g.leaf(w.to_vec(), &[8], true);
            let cat = g.concat_cols(&[hkv, hcv]).unwrap();
            let logit = g.dot_rows(cat, wv).unwrap();
            let beta = g.sigmoid(logit);
            let ones = g.constant(vec![1.0; 2], &[2]);
            let inv = g.sub(ones, beta).unwrap();
            let t1 = g.scale_rows(hkv, beta).unwrap();
            let t2 = g.scale_rows(hcv, inv).unwrap();
            let out = g.add(t1, t2).unwrap();
            let weights = g.constant(vec![1.0, -2.0, 0.5, 3.0, 1.5, -1.0, 2.0, 0.25], &[2, 4]);
            let m = g.mul(out, weights).unwrap();
            let loss = g.sum(m);
            (g, hkv, hcv, wv, loss)
        };
        let (mut g, hkv, hcv, wv, loss) = run(&hk0, &hc0, &w0);
        g.backward(loss).unwrap();
        let grads = [
            g.grad(hkv).unwrap().to_vec(),
            g.grad(hcv).unwrap().to_vec(),
            g.grad(wv).unwrap().to_vec(),
        ];
        let inputs: [&[f64]; 3] = [&hk0, &hc0, &w0];
        for idx in 0..3 {
            let err = grad_check(
                |x| {
                    let mut p: Vec<&[f64]> = inputs.to_vec();
                    p[idx] = x;
                    let (g, _, _, _, loss) = run(p[0], p[1], p[2]);
                    g.scalar(loss)
                },
                inputs[idx],
                &grads[idx],
                FD_EPS,
            );
            assert!(err < FD_TOL, "input {idx}: fd error {err}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], &[1, 2], true);
        assert!(matches!(
            g.backward(x),
            Err(Error::NonScalarLoss { numel: 2 })
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(vec![2.0], &[1], true);
        let c = g.constant(vec![3.0], &[1]);
        let y = g.mul(x, c).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0]);
        assert!(g.grad(c).is_none());
    }
}
