//! Dense f32 kernels. Every loop has a fixed evaluation order so repeated
//! calls are bitwise reproducible.

/// `x[rows, n_in] · w[n_in, n_out] (+ b)` into a fresh `[rows, n_out]` buffer.
pub fn matmul(x: &[f32], rows: usize, w: &[f32], n_in: usize, n_out: usize, b: Option<&[f32]>) -> Vec<f32> {
    debug_assert_eq!(x.len(), rows * n_in);
    debug_assert_eq!(w.len(), n_in * n_out);
    let mut out = vec![0.0f32; rows * n_out];
    for r in 0..rows {
        let xr = &x[r * n_in..(r + 1) * n_in];
        let or = &mut out[r * n_out..(r + 1) * n_out];
        if let Some(b) = b {
            or.copy_from_slice(b);
        }
        for (k, &a) in xr.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let wk = &w[k * n_out..(k + 1) * n_out];
            for (o, &wv) in or.iter_mut().zip(wk) {
                *o += a * wv;
            }
        }
    }
    out
}

pub fn layer_norm(x: &[f32], gain: &[f32], bias: Option<&[f32]>, eps: f32) -> Vec<f32> {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| {
            let y = (v - mean) * inv * gain[i];
            match bias {
                Some(b) => y + b[i],
                None => y,
            }
        })
        .collect()
}

pub fn rms_norm(x: &[f32], gain: &[f32], eps: f32) -> Vec<f32> {
    let n = x.len() as f32;
    let ms = x.iter().map(|v| v * v).sum::<f32>() / n;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

/// tanh approximation used by GPT-2.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Rotate-half rotary embedding applied in place to one head vector.
pub fn apply_rope(head: &mut [f32], pos: usize, base: f32) {
    let half = head.len() / 2;
    for i in 0..half {
        let freq = base.powf(-2.0 * i as f32 / head.len() as f32);
        let angle = pos as f32 * freq;
        let (sin, cos) = angle.sin_cos();
        let a = head[i];
        let b = head[i + half];
        head[i] = a * cos - b * sin;
        head[i + half] = a * sin + b * cos;
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(x: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v.total_cmp(&x[best]).is_gt() {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values, score-descending, ties by lower index.
pub fn top_k(x: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Rank of `target` (0 = best) under the same ordering as [`top_k`].
pub fn rank_of(x: &[f32], target: usize) -> usize {
    let t = x[target];
    x.iter()
        .enumerate()
        .filter(|&(i, &v)| v.total_cmp(&t).is_gt() || (v.total_cmp(&t).is_eq() && i < target))
        .count()
}
