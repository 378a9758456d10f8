use super::{Result, Tensor, TensorError};

/// `c = alpha·op(a)·op(b) + beta·c` on row-major slices. `ta`/`tb` select the
/// transposed view of the stored matrix; `m, k, n` describe the logical product.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major blocks whose lengths were checked by the assertion.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn invalid(op: &'static str, t: &Tensor, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: t.shape().to_vec(),
        reason: reason.into(),
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, p| {
            for t in p.iter().filter(|t| t.requires_grad()) {
                t.accumulate_grad(|acc| acc.iter_mut().zip(g).for_each(|(a, g)| *a += g));
            }
        }),
    ))
}

/// Elementwise product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, p| {
            let (a, b) = (&p[0], &p[1]);
            if a.requires_grad() {
                let bd = b.to_vec();
                a.accumulate_grad(|acc| {
                    for ((acc, g), y) in acc.iter_mut().zip(g).zip(&bd) {
                        *acc += g * y;
                    }
                });
            }
            if b.requires_grad() {
                let ad = a.to_vec();
                b.accumulate_grad(|acc| {
                    for ((acc, g), x) in acc.iter_mut().zip(g).zip(&ad) {
                        *acc += g * x;
                    }
                });
            }
        }),
    ))
}

/// Sum of all elements, as a scalar.
pub fn sum(x: &Tensor) -> Tensor {
    let total = x.data().iter().sum();
    Tensor::from_op(
        vec![],
        vec![total],
        vec![x.clone()],
        Box::new(|g, p| p[0].accumulate_grad(|acc| acc.iter_mut().for_each(|a| *a += g[0]))),
    )
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(|g, p| {
            let input = p[0].to_vec();
            p[0].accumulate_grad(|acc| {
                for ((a, g), x) in acc.iter_mut().zip(g).zip(&input) {
                    if *x > 0.0 {
                        *a += g;
                    }
                }
            });
        }),
    )
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(invalid(op, t, "expected a rank-4 tensor")),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<[usize; 2]> {
    match *t.shape() {
        [a, b] => Ok([a, b]),
        _ => Err(invalid(op, t, "expected a rank-2 tensor")),
    }
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one image `[cin, h, w]` into `[cin·kh·kw, ho·wo]`.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let n = self.positions();
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters columns back, accumulating.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let n = self.positions();
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation: `[B,Cin,H,W] ⋆ [Cout,Cin,kh,kw] + bias[Cout]`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let [batch, cin, h, w] = dims4("conv2d", input)?;
    let [cout, wcin, kh, kw] = dims4("conv2d", weight)?;
    let mismatch = |right: &Tensor| TensorError::ShapeMismatch {
        op: "conv2d",
        left: input.shape().to_vec(),
        right: right.shape().to_vec(),
    };
    if wcin != cin {
        return Err(mismatch(weight));
    }
    if bias.shape() != [cout] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: weight.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(invalid("conv2d", input, "stride must be positive"));
    }
    if h + 2 * pad < kh
        || w + 2 * pad < kw
        || !(h + 2 * pad - kh).is_multiple_of(stride)
        || !(w + 2 * pad - kw).is_multiple_of(stride)
    {
        return Err(mismatch(weight));
    }
    let geo = ConvGeometry {
        cin,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (w + 2 * pad - kw) / stride + 1,
    };
    let (patch, positions) = (geo.patch(), geo.positions());

    let mut out = vec![0.0; batch * cout * positions];
    {
        let x = input.data();
        let wd = weight.data();
        let bd = bias.data();
        let mut cols = vec![0.0; patch * positions];
        for b in 0..batch {
            geo.im2col(&x[b * cin * h * w..(b + 1) * cin * h * w], &mut cols);
            let dst = &mut out[b * cout * positions..(b + 1) * cout * positions];
            for (co, row) in dst.chunks_exact_mut(positions).enumerate() {
                row.fill(bd[co]);
            }
            gemm(cout, patch, positions, &wd, false, &cols, false, 1.0, dst);
        }
    }

    Ok(Tensor::from_op(
        vec![batch, cout, geo.ho, geo.wo],
        out,
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |g, p| {
            let (input, weight, bias) = (&p[0], &p[1], &p[2]);
            if bias.requires_grad() {
                bias.accumulate_grad(|acc| {
                    for (i, chunk) in g.chunks_exact(positions).enumerate() {
                        acc[i % cout] += chunk.iter().sum::<f64>();
                    }
                });
            }
            let need_w = weight.requires_grad();
            let need_x = input.requires_grad();
            if !need_w && !need_x {
                return;
            }
            let x = input.to_vec();
            let wd = weight.to_vec();
            let img_len = cin * h * w;
            let mut cols = vec![0.0; patch * positions];
            let mut dw = vec![0.0; cout * patch];
            let mut dx = if need_x { vec![0.0; batch * img_len] } else { Vec::new() };
            for b in 0..batch {
                let gb = &g[b * cout * positions..(b + 1) * cout * positions];
                if need_w {
                    geo.im2col(&x[b * img_len..(b + 1) * img_len], &mut cols);
                    gemm(cout, positions, patch, gb, false, &cols, true, 1.0, &mut dw);
                }
                if need_x {
                    gemm(patch, cout, positions, &wd, true, gb, false, 0.0, &mut cols);
                    geo.col2im(&cols, &mut dx[b * img_len..(b + 1) * img_len]);
                }
            }
            if need_w {
                weight.accumulate_grad(|acc| acc.iter_mut().zip(&dw).for_each(|(a, d)| *a += d));
            }
            if need_x {
                input.accumulate_grad(|acc| acc.iter_mut().zip(&dx).for_each(|(a, d)| *a += d));
            }
        }),
    ))
}

/// 2×2 max pooling with stride 2. Ties go to the first element in row-major
/// window order.
pub fn maxpool2(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = dims4("maxpool2", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid("maxpool2", x, "spatial dimensions must be even"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut argmax = Vec::with_capacity(b * c * ho * wo);
    {
        let d = x.data();
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best_i = base + 2 * oy * w + 2 * ox;
                    let mut best = d[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if d[i] > best {
                            best = d[i];
                            best_i = i;
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![b, c, ho, wo],
        out,
        vec![x.clone()],
        Box::new(move |g, p| {
            p[0].accumulate_grad(|acc| {
                for (gi, &src) in g.iter().zip(&argmax) {
                    acc[src] += gi;
                }
            });
        }),
    ))
}

/// Mean over the spatial axes: `[B,C,H,W] -> [B,C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = dims4("global_avg_pool", x)?;
    let area = h * w;
    if area == 0 {
        return Err(invalid("global_avg_pool", x, "empty spatial extent"));
    }
    let out = x
        .data()
        .chunks_exact(area)
        .map(|plane| plane.iter().sum::<f64>() / area as f64)
        .collect();
    Ok(Tensor::from_op(
        vec![b, c],
        out,
        vec![x.clone()],
        Box::new(move |g, p| {
            p[0].accumulate_grad(|acc| {
                for (plane, gi) in acc.chunks_exact_mut(area).zip(g) {
                    let share = gi / area as f64;
                    plane.iter_mut().for_each(|a| *a += share);
                }
            });
        }),
    ))
}

/// Affine map `x·wᵀ + b` with `x: [B,D]`, `w: [E,D]`, `b: [E]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [batch, d] = dims2("linear", x)?;
    let [e, wd] = dims2("linear", w)?;
    if wd != d {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    if b.shape() != [e] {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(batch * e);
    for _ in 0..batch {
        out.extend_from_slice(&b.data());
    }
    gemm(batch, d, e, &x.data(), false, &w.data(), true, 1.0, &mut out);
    Ok(Tensor::from_op(
        vec![batch, e],
        out,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g, p| {
            let (x, w, b) = (&p[0], &p[1], &p[2]);
            if b.requires_grad() {
                b.accumulate_grad(|acc| {
                    for row in g.chunks_exact(e) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                });
            }
            if w.requires_grad() {
                let xd = x.to_vec();
                w.accumulate_grad(|acc| gemm(e, batch, d, g, true, &xd, false, 1.0, acc));
            }
            if x.requires_grad() {
                let wd = w.to_vec();
                x.accumulate_grad(|acc| gemm(batch, e, d, g, false, &wd, false, 1.0, acc));
            }
        }),
    ))
}

/// Rows `start..end` along the leading axis.
pub fn slice_rows(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let rows = *x
        .shape()
        .first()
        .ok_or_else(|| invalid("slice_rows", x, "scalar has no rows"))?;
    if start > end || end > rows {
        return Err(invalid(
            "slice_rows",
            x,
            format!("row range {start}..{end} out of bounds"),
        ));
    }
    let stride = x.len() / rows.max(1);
    let mut shape = x.shape().to_vec();
    shape[0] = end - start;
    let data = x.data()[start * stride..end * stride].to_vec();
    Ok(Tensor::from_op(
        shape,
        data,
        vec![x.clone()],
        Box::new(move |g, p| {
            p[0].accumulate_grad(|acc| {
                acc[start * stride..end * stride]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, v)| *a += v);
            });
        }),
    ))
}

/// Per-class mean rows of `x: [M, D]`. Every class in `0..classes` must occur
/// the same number of times in `labels`.
pub fn class_means(x: &Tensor, labels: &[usize], classes: usize) -> Result<Tensor> {
    let [m, d] = dims2("class_means", x)?;
    if labels.len() != m {
        return Err(TensorError::UnbalancedLabels {
            classes,
            detail: format!("{} labels for {m} rows", labels.len()),
        });
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l >= classes {
            return Err(TensorError::LabelOutOfRange { label: l, classes });
        }
        counts[l] += 1;
    }
    if classes == 0 || counts.iter().any(|&c| c == 0 || c != counts[0]) {
        return Err(TensorError::UnbalancedLabels {
            classes,
            detail: format!("per-class counts {counts:?}"),
        });
    }
    let per_class = counts[0] as f64;
    let mut out = vec![0.0; classes * d];
    {
        let xd = x.data();
        for (row, &l) in xd.chunks_exact(d).zip(labels) {
            out[l * d..(l + 1) * d]
                .iter_mut()
                .zip(row)
                .for_each(|(o, v)| *o += v);
        }
    }
    out.iter_mut().for_each(|v| *v /= per_class);
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        vec![classes, d],
        out,
        vec![x.clone()],
        Box::new(move |g, p| {
            p[0].accumulate_grad(|acc| {
                for (row, &l) in acc.chunks_exact_mut(d).zip(&labels) {
                    for (a, v) in row.iter_mut().zip(&g[l * d..(l + 1) * d]) {
                        *a += v / per_class;
                    }
                }
            });
        }),
    ))
}

/// `out[i][j] = -‖q_i − c_j‖²` for `q: [M, D]`, `c: [N, D]`.
pub fn neg_sq_distances(q: &Tensor, c: &Tensor) -> Result<Tensor> {
    let [m, d] = dims2("neg_sq_distances", q)?;
    let [n, dc] = dims2("neg_sq_distances", c)?;
    if d != dc {
        return Err(TensorError::ShapeMismatch {
            op: "neg_sq_distances",
            left: q.shape().to_vec(),
            right: c.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(m * n);
    {
        let (qd, cd) = (q.data(), c.data());
        for qi in qd.chunks_exact(d) {
            for cj in cd.chunks_exact(d) {
                out.push(-qi.iter().zip(cj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
            }
        }
    }
    Ok(Tensor::from_op(
        vec![m, n],
        out,
        vec![q.clone(), c.clone()],
        Box::new(move |g, p| {
            let (qd, cd) = (p[0].to_vec(), p[1].to_vec());
            // d/dq_i = Σ_j -2 g_ij (q_i - c_j); d/dc_j = Σ_i 2 g_ij (q_i - c_j)
            let mut dq = vec![0.0; m * d];
            let mut dc = vec![0.0; n * d];
            for i in 0..m {
                for j in 0..n {
                    let gij = g[i * n + j];
                    if gij == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        let diff = qd[i * d + k] - cd[j * d + k];
                        dq[i * d + k] -= 2.0 * gij * diff;
                        dc[j * d + k] += 2.0 * gij * diff;
                    }
                }
            }
            if p[0].requires_grad() {
                p[0].accumulate_grad(|acc| acc.iter_mut().zip(&dq).for_each(|(a, v)| *a += v));
            }
            if p[1].requires_grad() {
                p[1].accumulate_grad(|acc| acc.iter_mut().zip(&dc).for_each(|(a, v)| *a += v));
            }
        }),
    ))
}

/// Mean over rows of `-log softmax(logits_i)[label_i]`, using the max-shift
/// log-sum-exp.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let [m, n] = dims2("softmax_cross_entropy", logits)?;
    if labels.len() != m || m == 0 {
        return Err(invalid(
            "softmax_cross_entropy",
            logits,
            format!("{} labels for {m} rows", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= n) {
        return Err(TensorError::LabelOutOfRange { label, classes: n });
    }
    let mut probs = Vec::with_capacity(m * n);
    let mut loss = 0.0;
    for (row, &label) in logits.data().chunks_exact(n).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        loss += log_z - row[label];
        probs.extend(row.iter().map(|v| (v - log_z).exp()));
    }
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        vec![],
        vec![loss / m as f64],
        vec![logits.clone()],
        Box::new(move |g, p| {
            let scale = g[0] / m as f64;
            p[0].accumulate_grad(|acc| {
                for (i, &label) in labels.iter().enumerate() {
                    for j in 0..n {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        acc[i * n + j] += scale * (probs[i * n + j] - onehot);
                    }
                }
            });
        }),
    ))
}
