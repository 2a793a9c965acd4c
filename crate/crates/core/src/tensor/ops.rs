use super::{accumulate, same_shape, Op, Result, Tape, Tensor, TensorError, Var};

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            for (o, &b_pj) in out_row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += a_ip * b_pj;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

pub(crate) fn rope_angle(position: usize, pair: usize, head_dim: usize, base: f64) -> f64 {
    let theta = base.powf(-2.0 * pair as f64 / head_dim as f64);
    position as f64 * theta
}

impl Tape {
    fn unary<F: Fn(f64) -> f64>(&mut self, x: Var, op: Op, f: F) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        self.push(value, op, &[x])
    }

    fn binary<F: Fn(f64, f64) -> f64>(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        what: &str,
        f: F,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, what)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Element-wise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Minimum(a, b), "minimum", f64::min)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Clamps into `[lo, hi]`; the gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// `[m,k] x [k,n] -> [m,n]`. A 1-D left operand is a single row and
    /// yields a 1-D result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2()?;
        let [k2, n] = bv.shape() else {
            return Err(TensorError::Dimension(format!(
                "matmul right operand must be 2-D, got {:?}",
                bv.shape()
            )));
        };
        if k != *k2 {
            return Err(TensorError::Dimension(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let n = *n;
        let data = matmul_raw(av.data(), bv.data(), m, k, n);
        let shape = if av.shape().len() == 1 {
            vec![n]
        } else {
            vec![m, n]
        };
        Ok(self.push(Tensor { shape, data }, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [r, c] = xv.shape() else {
            return Err(TensorError::Dimension(format!(
                "transpose needs a 2-D tensor, got {:?}",
                xv.shape()
            )));
        };
        let (r, c) = (*r, *c);
        let data = transpose_raw(xv.data(), r, c);
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data,
            },
            Op::Transpose(x),
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(shape.to_vec(), xv.data().to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Gathers rows of a `[V,H]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let [vocab, hidden] = tv.shape() else {
            return Err(TensorError::Dimension(format!(
                "embedding table must be 2-D, got {:?}",
                tv.shape()
            )));
        };
        let (vocab, hidden) = (*vocab, *hidden);
        if ids.is_empty() {
            return Err(TensorError::Contract("embedding of an empty id list".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * hidden);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Contract(format!(
                    "embedding id {id} out of range for table of {vocab} rows"
                )));
            }
            data.extend_from_slice(tv.row(id));
        }
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), hidden],
                data,
            },
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    fn rowwise<F: Fn(&[f64]) -> Vec<f64>>(&mut self, x: Var, op: Op, f: F) -> Result<Var> {
        let xv = self.value(x);
        let (rows, _) = xv.dims2()?;
        let mut data = Vec::with_capacity(xv.numel());
        for i in 0..rows {
            data.extend(f(xv.row(i)));
        }
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        Ok(self.push(value, op, &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.rowwise(x, Op::SoftmaxRows(x), softmax_row)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.rowwise(x, Op::LogSoftmaxRows(x), log_softmax_row)
    }

    /// Softmax of row `i` over columns `0..=i`; later columns are exactly 0.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [rows, cols] = xv.shape() else {
            return Err(TensorError::Dimension(format!(
                "causal_softmax needs a 2-D tensor, got {:?}",
                xv.shape()
            )));
        };
        let (rows, cols) = (*rows, *cols);
        if rows > cols {
            return Err(TensorError::Dimension(format!(
                "causal_softmax needs rows <= cols, got [{rows}, {cols}]"
            )));
        }
        let offset = cols - rows;
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let visible = i + offset + 1;
            let probs = softmax_row(&xv.row(i)[..visible]);
            data[i * cols..i * cols + visible].copy_from_slice(&probs);
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows, cols],
                data,
            },
            Op::CausalSoftmax(x),
            &[x],
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, vocab) = lv.dims2()?;
        if targets.len() != rows {
            return Err(TensorError::Dimension(format!(
                "cross_entropy: {rows} rows but {} targets",
                targets.len()
            )));
        }
        let mut probs = Vec::with_capacity(rows * vocab);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(TensorError::Contract(format!(
                    "target {t} out of range for vocabulary {vocab}"
                )));
            }
            let row = lv.row(i);
            total -= log_softmax_row(row)[t];
            probs.extend(softmax_row(row));
        }
        let loss = total / rows as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Contract("concat of zero tensors".into()));
        };
        let (_, cols) = self.value(first).dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            let (r, c) = pv.dims2()?;
            if c != cols {
                return Err(TensorError::Dimension(format!(
                    "concat_rows: column counts differ ({c} vs {cols})"
                )));
            }
            rows += r;
            data.extend_from_slice(pv.data());
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows, cols],
                data,
            },
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Contract("concat of zero tensors".into()));
        };
        let (rows, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(TensorError::Dimension(format!(
                    "concat_cols: row counts differ ({r} vs {rows})"
                )));
            }
            widths.push(c);
        }
        let cols: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows, cols],
                data,
            },
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2()?;
        if len == 0 || start + len > rows {
            return Err(TensorError::Dimension(format!(
                "slice_rows {start}..{} out of bounds for {rows} rows",
                start + len
            )));
        }
        let data = xv.data()[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(
            Tensor {
                shape: vec![len, cols],
                data,
            },
            Op::SliceRows { x, start },
            &[x],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2()?;
        if len == 0 || start + len > cols {
            return Err(TensorError::Dimension(format!(
                "slice_cols {start}..{} out of bounds for {cols} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows, len],
                data,
            },
            Op::SliceCols { x, start },
            &[x],
        ))
    }

    /// `out[i] = x[i, ids[i]]`.
    pub fn pick(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2()?;
        if ids.len() != rows {
            return Err(TensorError::Dimension(format!(
                "pick: {rows} rows but {} ids",
                ids.len()
            )));
        }
        let mut data = Vec::with_capacity(rows);
        for (i, &id) in ids.iter().enumerate() {
            if id >= cols {
                return Err(TensorError::Contract(format!(
                    "pick id {id} out of range for {cols} columns"
                )));
            }
            data.push(xv.row(i)[id]);
        }
        Ok(self.push(
            Tensor::vector(data),
            Op::Pick {
                x,
                ids: ids.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps) * gain` for `x` of shape `[n]` or
    /// `[rows, n]` and `gain` of shape `[n]`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps < 0.0 {
            return Err(TensorError::Configuration(format!(
                "rms_norm eps must be non-negative, got {eps}"
            )));
        }
        let (xv, gv) = (self.value(x), self.value(gain));
        let (rows, n) = xv.dims2()?;
        if gv.shape() != [n] {
            return Err(TensorError::Dimension(format!(
                "rms_norm gain shape {:?} does not match feature size {n}",
                gv.shape()
            )));
        }
        let mut data = Vec::with_capacity(rows * n);
        let mut inv_rms = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xv.row(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            data.extend(row.iter().zip(gv.data()).map(|(v, g)| v * inv * g));
        }
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// `silu(a) * b`.
    pub fn swiglu(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::SwiGlu(a, b), "swiglu", |x, y| x * sigmoid(x) * y)
    }

    /// Rotary embedding over `[seq, heads, head_dim]`: each consecutive pair
    /// `(2j, 2j+1)` at sequence index `s` rotates by
    /// `positions[s] * base^(-2j/head_dim)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: f64) -> Result<Var> {
        let xv = self.value(x);
        let [seq, heads, head_dim] = xv.shape() else {
            return Err(TensorError::Dimension(format!(
                "rope needs [seq, heads, head_dim], got {:?}",
                xv.shape()
            )));
        };
        let (seq, heads, head_dim) = (*seq, *heads, *head_dim);
        if head_dim % 2 != 0 {
            return Err(TensorError::Configuration(format!(
                "rope head_dim must be even, got {head_dim}"
            )));
        }
        if positions.len() != seq {
            return Err(TensorError::Dimension(format!(
                "rope: {} positions for sequence length {seq}",
                positions.len()
            )));
        }
        let mut data = xv.data().to_vec();
        rotate_pairs(&mut data, positions, heads, head_dim, base, 1.0);
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        Ok(self.push(
            value,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                base,
            },
            &[x],
        ))
    }

    pub(super) fn propagate(&self, idx: usize, adj: &[f64], adjoints: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        accumulate(adjoints, *v, adj.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(adjoints, *a, adj.to_vec());
                }
                if wants(b) {
                    accumulate(adjoints, *b, adj.iter().map(|g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if wants(a) {
                    accumulate(adjoints, *a, adj.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if wants(b) {
                    accumulate(adjoints, *b, adj.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if wants(a) {
                    let g = adj
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (x, y))| if x <= y { *g } else { 0.0 })
                        .collect();
                    accumulate(adjoints, *a, g);
                }
                if wants(b) {
                    let g = adj
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (x, y))| if x <= y { 0.0 } else { *g })
                        .collect();
                    accumulate(adjoints, *b, g);
                }
            }
            Op::Neg(x) => accumulate(adjoints, *x, adj.iter().map(|g| -g).collect()),
            Op::Scale(x, f) => accumulate(adjoints, *x, adj.iter().map(|g| g * f).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => accumulate(adjoints, *x, adj.to_vec()),
            Op::Exp(x) => {
                let y = node.value.data();
                accumulate(adjoints, *x, adj.iter().zip(y).map(|(g, y)| g * y).collect());
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let g = adj
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if *v >= *lo && *v <= *hi { *g } else { 0.0 })
                    .collect();
                accumulate(adjoints, *x, g);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2().expect("checked at record time");
                let n = bv.shape()[1];
                if wants(a) {
                    let bt = transpose_raw(bv.data(), k, n);
                    accumulate(adjoints, *a, matmul_raw(adj, &bt, m, n, k));
                }
                if wants(b) {
                    let at = transpose_raw(av.data(), m, k);
                    accumulate(adjoints, *b, matmul_raw(&at, adj, k, m, n));
                }
            }
            Op::Transpose(x) => {
                let [r, c] = node.value.shape() else { unreachable!() };
                accumulate(adjoints, *x, transpose_raw(adj, *r, *c));
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let hidden = tv.shape()[1];
                let mut g = vec![0.0; tv.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    for (dst, src) in g[id * hidden..(id + 1) * hidden]
                        .iter_mut()
                        .zip(&adj[i * hidden..(i + 1) * hidden])
                    {
                        *dst += src;
                    }
                }
                accumulate(adjoints, *table, g);
            }
            Op::SoftmaxRows(x) | Op::CausalSoftmax(x) => {
                let y = &node.value;
                let (rows, cols) = y.dims2().expect("2-D");
                let mut g = vec![0.0; rows * cols];
                for i in 0..rows {
                    let yr = y.row(i);
                    let gr = &adj[i * cols..(i + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        g[i * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(adjoints, *x, g);
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                let (rows, cols) = y.dims2().expect("2-D");
                let mut g = vec![0.0; rows * cols];
                for i in 0..rows {
                    let yr = y.row(i);
                    let gr = &adj[i * cols..(i + 1) * cols];
                    let total: f64 = gr.iter().sum();
                    for j in 0..cols {
                        g[i * cols + j] = gr[j] - yr[j].exp() * total;
                    }
                }
                accumulate(adjoints, *x, g);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let cols = probs.len() / rows;
                let scale = adj[0] / rows as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    g[i * cols + t] -= scale;
                }
                accumulate(adjoints, *logits, g);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if wants(p) {
                        accumulate(adjoints, *p, adj[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = node.value.dims2().expect("2-D");
                let mut start = 0;
                for p in parts {
                    let (_, w) = self.value(*p).dims2().expect("2-D");
                    if wants(p) {
                        let mut g = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            g.extend_from_slice(&adj[i * cols + start..i * cols + start + w]);
                        }
                        accumulate(adjoints, *p, g);
                    }
                    start += w;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let (_, cols) = xv.dims2().expect("2-D");
                let mut g = vec![0.0; xv.numel()];
                g[start * cols..start * cols + adj.len()].copy_from_slice(adj);
                accumulate(adjoints, *x, g);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (rows, cols) = xv.dims2().expect("2-D");
                let len = adj.len() / rows;
                let mut g = vec![0.0; xv.numel()];
                for i in 0..rows {
                    g[i * cols + start..i * cols + start + len]
                        .copy_from_slice(&adj[i * len..(i + 1) * len]);
                }
                accumulate(adjoints, *x, g);
            }
            Op::Pick { x, ids } => {
                let xv = self.value(*x);
                let (_, cols) = xv.dims2().expect("2-D");
                let mut g = vec![0.0; xv.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    g[i * cols + id] = adj[i];
                }
                accumulate(adjoints, *x, g);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                accumulate(adjoints, *x, vec![adj[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                accumulate(adjoints, *x, vec![adj[0] / n as f64; n]);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain).data());
                let (rows, n) = xv.dims2().expect("2-D");
                if wants(x) {
                    let mut g = vec![0.0; rows * n];
                    for i in 0..rows {
                        let xr = xv.row(i);
                        let ar = &adj[i * n..(i + 1) * n];
                        let inv = inv_rms[i];
                        let dot: f64 = (0..n).map(|j| ar[j] * gv[j] * xr[j]).sum();
                        let coef = inv * inv * inv * dot / n as f64;
                        for j in 0..n {
                            g[i * n + j] = inv * gv[j] * ar[j] - xr[j] * coef;
                        }
                    }
                    accumulate(adjoints, *x, g);
                }
                if wants(gain) {
                    let mut g = vec![0.0; n];
                    for i in 0..rows {
                        let xr = xv.row(i);
                        for j in 0..n {
                            g[j] += adj[i * n + j] * xr[j] * inv_rms[i];
                        }
                    }
                    accumulate(adjoints, *gain, g);
                }
            }
            Op::SwiGlu(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if wants(a) {
                    let g = adj
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (&x, &y))| {
                            let s = sigmoid(x);
                            g * y * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    accumulate(adjoints, *a, g);
                }
                if wants(b) {
                    let g = adj
                        .iter()
                        .zip(av)
                        .map(|(g, &x)| g * x * sigmoid(x))
                        .collect();
                    accumulate(adjoints, *b, g);
                }
            }
            Op::Rope { x, positions, base } => {
                let [_, heads, head_dim] = node.value.shape() else { unreachable!() };
                let mut g = adj.to_vec();
                rotate_pairs(&mut g, positions, *heads, *head_dim, *base, -1.0);
                accumulate(adjoints, *x, g);
            }
        }
    }
}

/// Rotates consecutive pairs in place; `direction` of -1 applies the inverse.
pub(crate) fn rotate_pairs(
    data: &mut [f64],
    positions: &[usize],
    heads: usize,
    head_dim: usize,
    base: f64,
    direction: f64,
) {
    let row = heads * head_dim;
    for (s, &pos) in positions.iter().enumerate() {
        for pair in 0..head_dim / 2 {
            let angle = direction * rope_angle(pos, pair, head_dim, base);
            for h in 0..heads {
                let i = s * row + h * head_dim + 2 * pair;
                (data[i], data[i + 1]) = rotate_pair(data[i], data[i + 1], angle);
            }
        }
    }
}

pub(crate) fn rotate_pair(x0: f64, x1: f64, angle: f64) -> (f64, f64) {
    let (sin, cos) = angle.sin_cos();
    (x0 * cos - x1 * sin, x0 * sin + x1 * cos)
}
