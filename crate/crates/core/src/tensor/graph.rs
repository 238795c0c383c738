use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Softmax { a: Var },
    LayerNorm { a: Var, rstd: Vec<f64> },
    Gelu { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Sqrt { a: Var },
    SumAll { a: Var },
    SumLast { a: Var },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    Transpose { a: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Eager reverse-mode tape. Every op computes its value immediately and is
/// appended in topological order; [`Graph::backward`] walks the tape once in
/// reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
    grads: Vec<Option<Tensor>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() || (b.shape().len() == 1 && b.len() == a.last_dim())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph that rejects non-finite inputs and op outputs.
    pub fn checked() -> Self {
        Self {
            check_finite: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "node {} ({:?}) produced a non-finite value",
                self.nodes.len(),
                std::mem::discriminant(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::OutOfBounds(format!("var {} not in graph", v.0)))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Graph::backward`] call with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// `op(a) · op(b)` for 2-D operands, where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (ar, ac) = (av.shape()[0], av.shape()[1]);
        let (br, bc) = (bv.shape()[0], bv.shape()[1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims {k} vs {k2} ({:?}{} x {:?}{})",
                av.shape(),
                if ta { "ᵀ" } else { "" },
                bv.shape(),
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        let (rsa, csa) = if ta { (1, ac) } else { (ac, 1) };
        let (rsb, csb) = if tb { (1, bc) } else { (bc, 1) };
        gemm(
            m,
            k,
            n,
            av.data(),
            rsa,
            csa,
            bv.data(),
            rsb,
            csb,
            &mut out,
            n,
            1,
        );
        let rg = self.needs(&[a, b]);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, ta, tb },
            rg,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Elementwise sum; `b` may also be a vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if !broadcast_ok(av, bv) {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let c = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv.data()[i % c])
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "sub {:?} - {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Sub { a, b }, rg)
    }

    /// Elementwise product; `b` may also be a vector broadcast over rows.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if !broadcast_ok(av, bv) {
            return Err(Error::Shape(format!(
                "mul {:?} * {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let c = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv.data()[i % c])
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = &self.node(a)?.value;
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|x| x * c).collect(),
        )?;
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale { a, c }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = &self.node(a)?.value;
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|x| x + c).collect(),
        )?;
        let rg = self.needs(&[a]);
        self.push(out, Op::AddScalar { a }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        let c = av.last_dim();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(&[a]);
        self.push(out, Op::Softmax { a }, rg)
    }

    /// Normalization over the last axis to zero mean and unit variance
    /// (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let av = &self.node(a)?.value;
        let c = av.last_dim();
        if c == 0 {
            return Err(Error::Shape("layer norm over empty axis".into()));
        }
        let mut data = av.data().to_vec();
        let mut rstd = Vec::with_capacity(av.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            rstd.push(r);
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(&[a]);
        self.push(out, Op::LayerNorm { a, rstd }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        let data = av
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(&[a]);
        self.push(out, Op::Gelu { a }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|x| x.exp()).collect(),
        )?;
        let rg = self.needs(&[a]);
        self.push(out, Op::Exp { a }, rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|x| x.ln()).collect(),
        )?;
        let rg = self.needs(&[a]);
        self.push(out, Op::Log { a }, rg)
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|x| x.sqrt()).collect(),
        )?;
        let rg = self.needs(&[a]);
        self.push(out, Op::Sqrt { a }, rg)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.data().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll { a }, rg)
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        let c = av.last_dim();
        let data: Vec<f64> = av.data().chunks(c.max(1)).map(|r| r.iter().sum()).collect();
        let mut shape = av.shape().to_vec();
        shape.pop();
        let out = Tensor::new(shape, data)?;
        let rg = self.needs(&[a]);
        self.push(out, Op::SumLast { a }, rg)
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = &self.node(a)?.value;
        if av.shape().len() != 2 || start + len > av.shape()[1] {
            return Err(Error::Shape(format!(
                "slice cols {start}..{} of {:?}",
                start + len,
                av.shape()
            )));
        }
        let rows = av.shape()[0];
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let rg = self.needs(&[a]);
        self.push(out, Op::SliceCols { a, start }, rg)
    }

    /// Concatenation of 2-D tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let rows = self
            .node(parts[0])?
            .value
            .shape()
            .first()
            .copied()
            .unwrap_or(0);
        let mut width = 0;
        for &p in parts {
            let s = self.node(p)?.value.shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::Shape(format!("concat part {s:?} with {rows} rows")));
            }
            width += s[1];
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let out = Tensor::new(vec![rows, width], data)?;
        let rg = self.needs(parts);
        self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        if av.shape().len() != 2 {
            return Err(Error::Shape(format!("transpose of {:?}", av.shape())));
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = av.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        let rg = self.needs(&[a]);
        self.push(out, Op::Transpose { a }, rg)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let shape = self.node(output)?.value.shape().to_vec();
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar output {shape:?} needs an explicit seed"
            )));
        }
        self.backward_with(output, Tensor::full(&shape, 1.0))
    }

    /// Reverse pass seeded with `seed` (same shape as `output`). Gradients are
    /// retained for leaves only.
    pub fn backward_with(&mut self, output: Var, seed: Tensor) -> Result<()> {
        let out_shape = self.node(output)?.value.shape();
        if out_shape != seed.shape() {
            return Err(Error::Shape(format!(
                "seed {:?} for output {out_shape:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        grads.resize(self.nodes.len(), None);
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, n) = (y.shape()[0], y.shape()[1]);
                let (ar, ac) = (av.shape()[0], av.shape()[1]);
                let bc = bv.shape()[1];
                let k = if *ta { ar } else { ac };
                let (rsa, csa) = if *ta { (1, ac) } else { (ac, 1) };
                let (rsb, csb) = if *tb { (1, bc) } else { (bc, 1) };
                if self.nodes[a.0].requires_grad {
                    // d op(A) = G · op(B)ᵀ, written straight into A's layout.
                    let (rsc, csc) = if *ta { (1, m) } else { (k, 1) };
                    let buf = slot(grads, *a, av);
                    gemm(m, n, k, gd, n, 1, bv.data(), csb, rsb, buf, rsc, csc);
                }
                if self.nodes[b.0].requires_grad {
                    // d op(B) = op(A)ᵀ · G
                    let (rsc, csc) = if *tb { (1, k) } else { (n, 1) };
                    let buf = slot(grads, *b, bv);
                    gemm(k, m, n, av.data(), csa, rsa, gd, n, 1, buf, rsc, csc);
                }
            }
            Op::Add { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let buf = slot(grads, *a, &self.nodes[a.0].value);
                    for (x, d) in buf.iter_mut().zip(gd) {
                        *x += d;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let bv = &self.nodes[b.0].value;
                    let c = bv.len();
                    let buf = slot(grads, *b, bv);
                    for (i, d) in gd.iter().enumerate() {
                        buf[i % c] += d;
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let buf = slot(grads, *a, &self.nodes[a.0].value);
                    for (x, d) in buf.iter_mut().zip(gd) {
                        *x += d;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let buf = slot(grads, *b, &self.nodes[b.0].value);
                    for (x, d) in buf.iter_mut().zip(gd) {
                        *x -= d;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let c = bv.len();
                if self.nodes[a.0].requires_grad {
                    let buf = slot(grads, *a, av);
                    for (i, d) in gd.iter().enumerate() {
                        buf[i] += d * bv.data()[i % c];
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let buf = slot(grads, *b, bv);
                    for (i, d) in gd.iter().enumerate() {
                        buf[i % c] += d * av.data()[i];
                    }
                }
            }
            Op::Scale { a, c } => {
                let buf = slot(grads, *a, &self.nodes[a.0].value);
                for (x, d) in buf.iter_mut().zip(gd) {
                    *x += d * c;
                }
            }
            Op::AddScalar { a } => {
                let buf = slot(grads, *a, &self.nodes[a.0].value);
                for (x, d) in buf.iter_mut().zip(gd) {
                    *x += d;
                }
            }
            Op::Softmax { a } => {
                let c = y.last_dim().max(1);
                let buf = slot(grads, *a, &self.nodes[a.0].value);
                for ((yr, gr), br) in y.data().chunks(c).zip(gd.chunks(c)).zip(buf.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((x, p), q) in br.iter_mut().zip(yr).zip(gr) {
                        *x += p * (q - dot);
                    }
                }
            }
            Op::LayerNorm { a, rstd } => {
                let c = y.last_dim();
                let cf = c as f64;
                let buf = slot(grads, *a, &self.nodes[a.0].value);
                for (((yr, gr), br), r) in y
                    .data()
                    .chunks(c)
                    .zip(gd.chunks(c))
                    .zip(buf.chunks_mut(c))
                    .zip(rstd)
                {
                    let gmean = gr.iter().sum::<f64>() / cf;
                    let gy = yr.iter().zip(gr).map(|(p, q)| p * q).sum::<f64>() / cf;
                    for ((x, p), q) in br.iter_mut().zip(yr).zip(gr) {
                        *x += r * (q - gmean - p * gy);
                    }
                }
            }
            Op::Gelu { a } => {
                let av = &self.nodes[a.0].value;
                let buf = slot(grads, *a, av);
                for ((x, &v), d) in buf.iter_mut().zip(av.data()).zip(gd) {
                    let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                    let dt = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                    *x += d * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dt);
                }
            }
            Op::Exp { a } => {
                let buf = slot(grads, *a, &self.nodes[a.0].value);
                for ((x, e), d) in buf.iter_mut().zip(y.data()).zip(gd) {
                    *x += d * e;
                }
            }
            Op::Log { a } => {
                let av = &self.nodes[a.0].value;
                let buf = slot(grads, *a, av);
                for ((x, v), d) in buf.iter_mut().zip(av.data()).zip(gd) {
                    *x += d / v;
                }
            }
            Op::Sqrt { a } => {
                let buf = slot(grads, *a, &self.nodes[a.0].value);
                for ((x, s), d) in buf.iter_mut().zip(y.data()).zip(gd) {
                    if *s > 0.0 {
                        *x += d * 0.5 / s;
                    }
                }
            }
            Op::SumAll { a } => {
                let buf = slot(grads, *a, &self.nodes[a.0].value);
                let d = gd[0];
                for x in buf.iter_mut() {
                    *x += d;
                }
            }
            Op::SumLast { a } => {
                let av = &self.nodes[a.0].value;
                let c = av.last_dim().max(1);
                let buf = slot(grads, *a, av);
                for (br, d) in buf.chunks_mut(c).zip(gd) {
                    for x in br.iter_mut() {
                        *x += d;
                    }
                }
            }
            Op::SliceCols { a, start } => {
                let av = &self.nodes[a.0].value;
                let (c, len) = (av.shape()[1], y.shape()[1]);
                let buf = slot(grads, *a, av);
                for (r, gr) in gd.chunks(len.max(1)).enumerate() {
                    for (j, d) in gr.iter().enumerate() {
                        buf[r * c + start + j] += d;
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let width = y.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let pv = &self.nodes[p.0].value;
                    let pw = pv.shape()[1];
                    if self.nodes[p.0].requires_grad {
                        let buf = slot(grads, *p, pv);
                        for r in 0..pv.shape()[0] {
                            for j in 0..pw {
                                buf[r * pw + j] += gd[r * width + offset + j];
                            }
                        }
                    }
                    offset += pw;
                }
            }
            Op::Transpose { a } => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                let buf = slot(grads, *a, &self.nodes[a.0].value);
                for i in 0..r {
                    for j in 0..c {
                        buf[j * r + i] += gd[i * c + j];
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(like.shape()))
        .data_mut()
}

/// `C += A·B` over strided row/column views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the debug assertions above spell out the bounds; every caller
    // derives the strides from the operand shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn transposed_matmul_matches_explicit_transpose() {
        let mut g = Graph::new();
        let a = g
            .param(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
            .unwrap();
        let b = g
            .param(t(
                &[4, 3],
                &(0..12).map(|x| x as f64 * 0.5).collect::<Vec<_>>(),
            ))
            .unwrap();
        let y1 = g.matmul_t(a, b, true, true).unwrap();
        let at = g.transpose(a).unwrap();
        let bt = g.transpose(b).unwrap();
        let y2 = g.matmul(at, bt).unwrap();
        assert_eq!(g.value(y1), g.value(y2));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_statistics() {
        let mut g = Graph::new();
        let x = g.constant(t(&[5], &[3.0, -1.0, 4.0, 1.5, -9.0])).unwrap();
        let y = g.layer_norm(x, 0.0).unwrap();
        let v = g.value(y).data();
        let mean = v.iter().sum::<f64>() / 5.0;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5])).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
        let c = g.constant(Tensor::zeros(&[4])).unwrap();
        assert!(matches!(g.add(a, c), Err(Error::Shape(_))));
        let s = g.sum(a).unwrap();
        let _ = s;
        assert!(matches!(g.backward(a), Err(Error::Shape(_))));
        assert!(g.backward(Var(99)).is_err());
    }

    #[test]
    fn checked_graph_rejects_non_finite() {
        let mut g = Graph::checked();
        assert!(matches!(
            g.constant(Tensor::vector(vec![f64::NAN])),
            Err(Error::NonFinite(_))
        ));
        let x = g.constant(Tensor::vector(vec![-1.0])).unwrap();
        assert!(matches!(g.log(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sqrt_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0, 4.0])).unwrap();
        let y = g.sqrt(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.25]);
    }
}
