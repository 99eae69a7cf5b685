//! Dense two-frame optical flow by local polynomial expansion.
//!
//! Each frame is approximated around every pixel by a quadratic
//! `f(x) = x'Ax + b'x + c` fit under separable Gaussian weights. For a
//! pure translation the linear coefficients of the two frames pin the
//! displacement, and aggregating that constraint over a window gives a
//! dense field. A coarse-to-fine pyramid handles shifts larger than the
//! expansion window.
//!
//! Conventions, fixed across the crate:
//! * flow points from a pixel in `prev` to its position in `next`;
//!   scene content moving right produces positive `dx`,
//! * all arithmetic is `f64` and strictly sequential per field, so a
//!   given input always produces the bit-identical field,
//! * borders are reflect-padded (edge pixel not duplicated).

use crate::error::{Error, Result};
use crate::video_io::{resample, Frame, VideoClip};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FlowParams {
    pub pyramid_levels: usize,
    pub pyramid_scale: f64,
    pub window_size: usize,
    pub iterations: usize,
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            pyramid_levels: 3,
            pyramid_scale: 0.5,
            window_size: 15,
            iterations: 3,
            poly_n: 7,
            poly_sigma: 1.5,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0 {
            return Err(Error::InvalidParam("pyramid_levels must be >= 1".into()));
        }
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(Error::InvalidParam(format!(
                "pyramid_scale {} outside (0,1)",
                self.pyramid_scale
            )));
        }
        if self.window_size < 3 || self.window_size % 2 == 0 {
            return Err(Error::InvalidParam(format!(
                "window_size {} must be odd and >= 3",
                self.window_size
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParam("iterations must be >= 1".into()));
        }
        if self.poly_n < 3 || self.poly_n % 2 == 0 {
            return Err(Error::InvalidParam(format!(
                "poly_n {} must be odd and >= 3",
                self.poly_n
            )));
        }
        if !(self.poly_sigma > 0.0) {
            return Err(Error::InvalidParam("poly_sigma must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-pixel quadratic coefficients, interleaved
/// `[a11, a12, a22, bx, by, c]`. `a12` already carries the 1/2 of the
/// cross term: the fitted patch is `a11*i^2 + 2*a12*i*j + a22*j^2 + ...`
/// with `i` the x offset and `j` the y offset.
#[derive(Debug, Clone)]
pub struct PolyExpansion {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl PolyExpansion {
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    /// `[a11, a12, a22, bx, by, c]` at a pixel.
    #[inline]
    pub fn coeffs(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * 6;
        &self.data[i..i + 6]
    }
}

/// Dense displacement field, one `(dx, dy)` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            dx: vec![0.0; width * height],
            dy: vec![0.0; width * height],
        }
    }

    #[cfg(test)]
    pub(crate) fn from_raw(width: usize, height: usize, dx: Vec<f64>, dy: Vec<f64>) -> Self {
        assert_eq!(dx.len(), width * height);
        assert_eq!(dy.len(), width * height);
        FlowField {
            width,
            height,
            dx,
            dy,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    #[inline]
    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    #[inline]
    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    pub fn mean(&self) -> (f64, f64) {
        let n = (self.width * self.height) as f64;
        (
            self.dx.iter().sum::<f64>() / n,
            self.dy.iter().sum::<f64>() / n,
        )
    }

    /// Per-pixel magnitudes.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(dx, dy)| (dx * dx + dy * dy).sqrt())
            .collect()
    }
}

// ------------------------------------------------------------ helpers --

/// Reflect an out-of-range index back into `[0, len)` without repeating
/// the edge sample (`-1 -> 1`, `len -> len-2`).
#[inline]
fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= len {
            i = 2 * (len - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with reflected borders. Used for pyramid
/// construction only.
pub(crate) fn gaussian_blur(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i * i) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }

    let mut tmp = vec![0.0; width * height];
    for y in 0..height {
        let row = &data[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = reflect(x as isize + ki as isize - radius, width);
                acc += k * row[sx];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + ki as isize - radius, height);
                acc += k * tmp[sy * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Summed-area table with a zero top row and left column.
fn integral(data: &[f64], width: usize, height: usize) -> Vec<f64> {
    let w1 = width + 1;
    let mut sat = vec![0.0; w1 * (height + 1)];
    for y in 0..height {
        let mut rowsum = 0.0;
        for x in 0..width {
            rowsum += data[y * width + x];
            sat[(y + 1) * w1 + x + 1] = sat[y * w1 + x + 1] + rowsum;
        }
    }
    sat
}

/// Sum over the window centered at each pixel, window truncated at the
/// borders. Exact (summed-area table), not an approximation. Sums, not
/// means: the singularity gate on det(G) is calibrated for unnormalized
/// window aggregates.
fn window_sum(data: &[f64], width: usize, height: usize, window: usize) -> Vec<f64> {
    let r = (window / 2) as isize;
    let sat = integral(data, width, height);
    let w1 = width + 1;
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        let y0 = (y as isize - r).max(0) as usize;
        let y1 = ((y as isize + r + 1) as usize).min(height);
        for x in 0..width {
            let x0 = (x as isize - r).max(0) as usize;
            let x1 = ((x as isize + r + 1) as usize).min(width);
            out[y * width + x] = sat[y1 * w1 + x1] - sat[y0 * w1 + x1] - sat[y1 * w1 + x0]
                + sat[y0 * w1 + x0];
        }
    }
    out
}

// ---------------------------------------------------- poly expansion --

/// Weighted least-squares quadratic fit around every pixel of a raw
/// buffer. Separable: three vertical moment passes, then six horizontal
/// combinations, then a closed-form solve of the Gram system.
fn poly_expand_buf(
    data: &[f64],
    width: usize,
    height: usize,
    poly_n: usize,
    poly_sigma: f64,
) -> PolyExpansion {
    let n = (poly_n / 2) as isize;
    let mut g = Vec::with_capacity(poly_n);
    for i in -n..=n {
        g.push((-(i * i) as f64 / (2.0 * poly_sigma * poly_sigma)).exp());
    }
    let gsum: f64 = g.iter().sum();
    for v in &mut g {
        *v /= gsum;
    }
    // 1-D moments of the normalized kernel; the 2-D Gram matrix of the
    // basis (1, x, y, x^2, y^2, xy) is built from these.
    let mut m2 = 0.0;
    let mut m4 = 0.0;
    for (ki, &gv) in g.iter().enumerate() {
        let i = ki as isize - n;
        let i2 = (i * i) as f64;
        m2 += i2 * gv;
        m4 += i2 * i2 * gv;
    }
    let denom = m4 - m2 * m2; // > 0 for any non-degenerate kernel

    // vertical pass: plain, first and second y-moments
    let mut t0 = vec![0.0; width * height];
    let mut t1 = vec![0.0; width * height];
    let mut t2 = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            let mut s0 = 0.0;
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for (ki, &gv) in g.iter().enumerate() {
                let k = ki as isize - n;
                let sy = reflect(y as isize + k, height);
                let v = data[sy * width + x];
                s0 += gv * v;
                s1 += (k as f64) * gv * v;
                s2 += ((k * k) as f64) * gv * v;
            }
            let i = y * width + x;
            t0[i] = s0;
            t1[i] = s1;
            t2[i] = s2;
        }
    }

    let mut out = vec![0.0; width * height * 6];
    for y in 0..height {
        for x in 0..width {
            let mut s00 = 0.0;
            let mut s10 = 0.0;
            let mut s20 = 0.0;
            let mut s01 = 0.0;
            let mut s11 = 0.0;
            let mut s02 = 0.0;
            for (ki, &gv) in g.iter().enumerate() {
                let j = ki as isize - n;
                let sx = reflect(x as isize + j, width);
                let v0 = t0[y * width + sx];
                let v1 = t1[y * width + sx];
                let jf = j as f64;
                s00 += gv * v0;
                s10 += jf * gv * v0;
                s20 += jf * jf * gv * v0;
                s01 += gv * v1;
                s11 += jf * gv * v1;
                s02 += gv * t2[y * width + sx];
            }
            // Gram solve. The system decouples: x and y moments give the
            // linear terms, the cross moment gives the xy term, and
            // (1, x^2, y^2) couple in a 3x3 block with closed form:
            //   u = axx + ayy, v = axx - ayy
            let bx = s10 / m2;
            let by = s01 / m2;
            let a12 = s11 / (2.0 * m2 * m2);
            let u = (s20 + s02 - 2.0 * m2 * s00) / denom;
            let v = (s20 - s02) / denom;
            let a11 = 0.5 * (u + v);
            let a22 = 0.5 * (u - v);
            let c = s00 - m2 * u;
            let o = (y * width + x) * 6;
            out[o] = a11;
            out[o + 1] = a12;
            out[o + 2] = a22;
            out[o + 3] = bx;
            out[o + 4] = by;
            out[o + 5] = c;
        }
    }
    PolyExpansion {
        width,
        height,
        data: out,
    }
}

/// Quadratic expansion of a frame. `poly_n` odd window width, `poly_sigma`
/// the weight scale.
pub fn poly_expand(frame: &Frame, poly_n: usize, poly_sigma: f64) -> Result<PolyExpansion> {
    if poly_n < 3 || poly_n % 2 == 0 {
        return Err(Error::InvalidParam(format!(
            "poly_n {poly_n} must be odd and >= 3"
        )));
    }
    if !(poly_sigma > 0.0) {
        return Err(Error::InvalidParam("poly_sigma must be > 0".into()));
    }
    Ok(poly_expand_buf(
        frame.data(),
        frame.width(),
        frame.height(),
        poly_n,
        poly_sigma,
    ))
}

// ------------------------------------------------- displacement step --

/// One refinement of the flow between two expansions. `e2` is sampled at
/// positions warped by `prior` (nearest pixel), the displacement
/// constraint is aggregated over `window_size`, and the per-pixel 2x2
/// system `G d = h` is solved. Where `det(G) < 1e-9` (flat patches) the
/// prior is kept. The returned field is the total flow, not an increment.
pub fn displacement_step(
    e1: &PolyExpansion,
    e2: &PolyExpansion,
    prior: &FlowField,
    window_size: usize,
) -> Result<FlowField> {
    if e1.width != e2.width
        || e1.height != e2.height
        || prior.width != e1.width
        || prior.height != e1.height
    {
        return Err(Error::Mismatch(format!(
            "expansion/prior dims disagree: {}x{}, {}x{}, {}x{}",
            e1.width, e1.height, e2.width, e2.height, prior.width, prior.height
        )));
    }
    if window_size < 3 || window_size % 2 == 0 {
        return Err(Error::InvalidParam(format!(
            "window_size {window_size} must be odd and >= 3"
        )));
    }
    let (w, h) = (e1.width, e1.height);
    let mut g11 = vec![0.0; w * h];
    let mut g12 = vec![0.0; w * h];
    let mut g22 = vec![0.0; w * h];
    let mut h1 = vec![0.0; w * h];
    let mut h2 = vec![0.0; w * h];

    // Constraints within BORDER of the frame edge are damped hard:
    // reflected padding fakes motion there, so let the window fill
    // borders from interior evidence instead.
    const BORDER: usize = 8;
    let edge_w = |p: usize, len: usize| -> f64 {
        let d = p.min(len - 1 - p);
        if d >= BORDER {
            1.0
        } else {
            let t = (d + 1) as f64 / (BORDER + 1) as f64;
            t * t
        }
    };

    for y in 0..h {
        let wy = edge_w(y, h);
        for x in 0..w {
            let i = y * w + x;
            let px = prior.dx[i];
            let py = prior.dy[i];
            let sx = (x as f64 + px).round().clamp(0.0, (w - 1) as f64) as usize;
            let sy = (y as f64 + py).round().clamp(0.0, (h - 1) as f64) as usize;
            let c1 = e1.coeffs(x, y);
            let c2 = e2.coeffs(sx, sy);
            let scale = edge_w(x, w) * wy;
            let a11 = scale * 0.5 * (c1[0] + c2[0]);
            let a12 = scale * 0.5 * (c1[1] + c2[1]);
            let a22 = scale * 0.5 * (c1[2] + c2[2]);
            // constraint A*d = db, with the prior folded in so the
            // aggregated solve yields total flow
            let dbx = a11 * px + a12 * py - scale * 0.5 * (c2[3] - c1[3]);
            let dby = a12 * px + a22 * py - scale * 0.5 * (c2[4] - c1[4]);
            g11[i] = a11 * a11 + a12 * a12;
            g12[i] = a12 * (a11 + a22);
            g22[i] = a12 * a12 + a22 * a22;
            h1[i] = a11 * dbx + a12 * dby;
            h2[i] = a12 * dbx + a22 * dby;
        }
    }

    let g11 = window_sum(&g11, w, h, window_size);
    let g12 = window_sum(&g12, w, h, window_size);
    let g22 = window_sum(&g22, w, h, window_size);
    let h1 = window_sum(&h1, w, h, window_size);
    let h2 = window_sum(&h2, w, h, window_size);

    let mut out = FlowField::zeros(w, h);
    for i in 0..w * h {
        let det = g11[i] * g22[i] - g12[i] * g12[i];
        if det < 1e-9 {
            out.dx[i] = prior.dx[i];
            out.dy[i] = prior.dy[i];
        } else {
            out.dx[i] = (g22[i] * h1[i] - g12[i] * h2[i]) / det;
            out.dy[i] = (g11[i] * h2[i] - g12[i] * h1[i]) / det;
        }
    }
    Ok(out)
}

// ------------------------------------------------------ full pipeline --

/// Smallest pyramid level we will expand; below this the fit window
/// dominates the image.
const MIN_LEVEL_DIM: usize = 16;

/// Dense flow from `prev` to `next` over a coarse-to-fine pyramid.
pub fn compute_flow(prev: &Frame, next: &Frame, params: &FlowParams) -> Result<FlowField> {
    params.validate()?;
    if prev.width() != next.width() || prev.height() != next.height() {
        return Err(Error::Mismatch(format!(
            "frame dims disagree: {}x{} vs {}x{}",
            prev.width(),
            prev.height(),
            next.width(),
            next.height()
        )));
    }
    let (w0, h0) = (prev.width(), prev.height());

    // level sizes, finest first; levels that would fall under
    // MIN_LEVEL_DIM are dropped
    let mut sizes = Vec::new();
    for level in 0..params.pyramid_levels {
        let s = params.pyramid_scale.powi(level as i32);
        let lw = (w0 as f64 * s).round() as usize;
        let lh = (h0 as f64 * s).round() as usize;
        if lw < MIN_LEVEL_DIM || lh < MIN_LEVEL_DIM {
            break;
        }
        sizes.push((lw, lh));
    }
    if sizes.is_empty() {
        sizes.push((w0, h0));
    }

    // each level is blurred and resampled from the original, not from the
    // level above; sigma matches the decimation factor
    let level_image = |frame: &Frame, lw: usize, lh: usize| -> Vec<f64> {
        if lw == w0 && lh == h0 {
            return frame.data().to_vec();
        }
        let scale = lw as f64 / w0 as f64;
        let sigma = 0.5 * (1.0 / scale - 1.0);
        let blurred = gaussian_blur(frame.data(), w0, h0, sigma);
        resample(&blurred, w0, h0, lw, lh)
    };

    let mut flow: Option<FlowField> = None;
    for level in (0..sizes.len()).rev() {
        let (lw, lh) = sizes[level];
        let p1 = poly_expand_buf(
            &level_image(prev, lw, lh),
            lw,
            lh,
            params.poly_n,
            params.poly_sigma,
        );
        let p2 = poly_expand_buf(
            &level_image(next, lw, lh),
            lw,
            lh,
            params.poly_n,
            params.poly_sigma,
        );
        let mut cur = match flow.take() {
            None => FlowField::zeros(lw, lh),
            Some(prev_flow) => {
                // upsample and rescale the coarser estimate
                let rx = lw as f64 / prev_flow.width as f64;
                let ry = lh as f64 / prev_flow.height as f64;
                let dx = resample(&prev_flow.dx, prev_flow.width, prev_flow.height, lw, lh);
                let dy = resample(&prev_flow.dy, prev_flow.width, prev_flow.height, lw, lh);
                FlowField {
                    width: lw,
                    height: lh,
                    dx: dx.into_iter().map(|v| v * rx).collect(),
                    dy: dy.into_iter().map(|v| v * ry).collect(),
                }
            }
        };
        for _ in 0..params.iterations {
            cur = displacement_step(&p1, &p2, &cur, params.window_size)?;
        }
        flow = Some(cur);
    }
    Ok(flow.expect("at least one level"))
}

/// Flow fields for every consecutive frame pair of a clip; `T-1` fields
/// for `T` frames. Pairs are independent, so they are computed in
/// parallel; output order is by frame index.
pub fn clip_flow_sequence(clip: &VideoClip, params: &FlowParams) -> Result<Vec<FlowField>> {
    params.validate()?;
    (0..clip.len() - 1)
        .into_par_iter()
        .map(|t| compute_flow(&clip.frames()[t], &clip.frames()[t + 1], params))
        .collect()
}

// ---------------------------------------------------------- debugging --

/// Flow magnitudes normalized to `[0,1]` for a PGM dump. An all-zero
/// field maps to an all-zero image, not NaN.
pub fn magnitude_image(field: &FlowField) -> Result<Frame> {
    let mags = field.magnitudes();
    let max = mags.iter().cloned().fold(0.0f64, f64::max);
    let data = if max < 1e-12 {
        vec![0.0; mags.len()]
    } else {
        mags.iter().map(|m| m / max).collect()
    };
    Frame::new(field.width(), field.height(), data)
}

/// CSV dump `x,y,dx,dy`, sampled every `stride` pixels in both axes.
pub fn flow_csv(field: &FlowField, stride: usize) -> Result<String> {
    if stride == 0 {
        return Err(Error::InvalidParam("stride must be >= 1".into()));
    }
    let mut out = String::from("x,y,dx,dy\n");
    let mut y = 0;
    while y < field.height() {
        let mut x = 0;
        while x < field.width() {
            let (dx, dy) = field.at(x, y);
            out.push_str(&format!("{x},{y},{dx},{dy}\n"));
            x += stride;
        }
        y += stride;
    }
    Ok(out)
}
