use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Affine2, Pose};

/// Parameters of a rigid warp with per-axis scaling.
///
/// The source point `center` lands on the center of the `out_w x out_h`
/// output; the content is rotated by `theta` degrees after scaling by
/// `(sx, sy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpSpec {
    pub center: (f64, f64),
    pub theta: f64,
    pub sx: f64,
    pub sy: f64,
    pub out_w: usize,
    pub out_h: usize,
}

impl WarpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.out_w == 0 || self.out_h == 0 {
            return Err(Error::invalid("warp output size must be positive"));
        }
        if !(self.sx > 0.0 && self.sy > 0.0 && self.sx.is_finite() && self.sy.is_finite()) {
            return Err(Error::invalid("warp scales must be positive"));
        }
        if !self.theta.is_finite() {
            return Err(Error::invalid("warp angle must be finite"));
        }
        Ok(())
    }
}

/// Bilinear warp; samples falling more than half a pixel outside `src` are 0.
pub fn warp_affine(src: &Image, spec: &WarpSpec) -> Result<Image> {
    spec.validate()?;
    let inv = Affine2::from_pose(normalize_angle(spec.theta), spec.sx, spec.sy).invert()?;
    let (ocx, ocy) = ((spec.out_w as f64 - 1.0) / 2.0, (spec.out_h as f64 - 1.0) / 2.0);
    let ch = src.channels();
    let mut out = Image::new(spec.out_w, spec.out_h, ch);
    let row_len = spec.out_w * ch;
    let rows: Vec<Vec<f32>> = crate::par::map_range(spec.out_h, |v| {
        let mut row = vec![0.0f32; row_len];
        for u in 0..spec.out_w {
            let (dx, dy) = inv.apply(u as f64 - ocx, v as f64 - ocy);
            let (x, y) = (spec.center.0 + dx, spec.center.1 + dy);
            for c in 0..ch {
                if let Some(s) = src.sample(x, y, c) {
                    row[u * ch + c] = s.clamp(0.0, 1.0);
                }
            }
        }
        row
    });
    for (v, row) in rows.into_iter().enumerate() {
        out.data_mut()[v * row_len..(v + 1) * row_len].copy_from_slice(&row);
    }
    Ok(out)
}

/// Exact sub-image copy; fails if `rect = (x, y, w, h)` leaves the image.
pub fn crop(src: &Image, rect: (i64, i64, i64, i64)) -> Result<Image> {
    let (x, y, w, h) = rect;
    if x < 0
        || y < 0
        || w <= 0
        || h <= 0
        || x + w > src.width() as i64
        || y + h > src.height() as i64
    {
        return Err(Error::OutOfBounds {
            rect,
            width: src.width(),
            height: src.height(),
        });
    }
    let (x, y, w, h) = (x as usize, y as usize, w as usize, h as usize);
    let ch = src.channels();
    let mut data = Vec::with_capacity(w * h * ch);
    for row in y..y + h {
        let start = (row * src.width() + x) * ch;
        data.extend_from_slice(&src.data()[start..start + w * ch]);
    }
    Image::from_vec(w, h, ch, data)
}

/// Copies `patch` into `dst` with its top-left at `(x, y)`.
pub fn paste(dst: &mut Image, patch: &Image, x: usize, y: usize) -> Result<()> {
    if patch.channels() != dst.channels()
        || x + patch.width() > dst.width()
        || y + patch.height() > dst.height()
    {
        return Err(Error::OutOfBounds {
            rect: (x as i64, y as i64, patch.width() as i64, patch.height() as i64),
            width: dst.width(),
            height: dst.height(),
        });
    }
    let ch = dst.channels();
    let dw = dst.width();
    for row in 0..patch.height() {
        let d = ((y + row) * dw + x) * ch;
        let s = row * patch.width() * ch;
        dst.data_mut()[d..d + patch.width() * ch]
            .copy_from_slice(&patch.data()[s..s + patch.width() * ch]);
    }
    Ok(())
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(src: &Image, w: usize, h: usize) -> Result<Image> {
    if w == 0 || h == 0 {
        return Err(Error::invalid("resize target must be at least 1x1"));
    }
    let fx = src.width() as f64 / w as f64;
    let fy = src.height() as f64 / h as f64;
    let ch = src.channels();
    let mut out = Image::new(w, h, ch);
    for v in 0..h {
        let y = ((v as f64 + 0.5) * fy - 0.5).clamp(0.0, src.height() as f64 - 1.0);
        for u in 0..w {
            let x = ((u as f64 + 0.5) * fx - 0.5).clamp(0.0, src.width() as f64 - 1.0);
            for c in 0..ch {
                // Clamped coordinates always sample in bounds.
                let s = src.sample(x, y, c).unwrap_or(0.0);
                out.set(u, v, c, s);
            }
        }
    }
    Ok(out)
}

/// A template rendered into a search-sized canvas, restricted to the
/// bounding box of its footprint.
#[derive(Debug, Clone)]
pub struct Footprint {
    /// Top-left of the region in canvas coordinates.
    pub x0: usize,
    pub y0: usize,
    pub values: Image,
    /// Row-major over `values`; true where the template covers the pixel.
    pub mask: Vec<bool>,
}

impl Footprint {
    pub fn width(&self) -> usize {
        self.values.width()
    }
    pub fn height(&self) -> usize {
        self.values.height()
    }
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Writes the covered pixels into `canvas`.
    pub fn composite_onto(&self, canvas: &mut Image) {
        let ch = canvas.channels();
        for v in 0..self.height() {
            for u in 0..self.width() {
                if self.mask[v * self.width() + u] {
                    for c in 0..ch {
                        let val = self.values.get(u, v, c.min(self.values.channels() - 1));
                        canvas.set(self.x0 + u, self.y0 + v, c, val);
                    }
                }
            }
        }
    }
}

/// Renders `template` placed with `pose` into a `canvas_w x canvas_h` frame.
///
/// Returns `None` when the footprint misses the canvas entirely.
pub fn render_footprint(
    template: &Image,
    pose: &Pose,
    canvas_w: usize,
    canvas_h: usize,
) -> Result<Option<Footprint>> {
    let inv = pose.affine().invert()?;
    let (tcx, tcy) = (
        (template.width() as f64 - 1.0) / 2.0,
        (template.height() as f64 - 1.0) / 2.0,
    );
    let (bx0, by0, bx1, by1) = pose.footprint(template.width(), template.height()).bounds();
    let x0 = bx0.floor().max(0.0) as i64;
    let y0 = by0.floor().max(0.0) as i64;
    let x1 = (bx1.ceil() as i64).min(canvas_w as i64 - 1);
    let y1 = (by1.ceil() as i64).min(canvas_h as i64 - 1);
    if x1 < x0 || y1 < y0 {
        return Ok(None);
    }
    let (w, h) = ((x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize);
    let ch = template.channels();
    let mut values = Image::new(w, h, ch);
    let mut mask = vec![false; w * h];
    for v in 0..h {
        for u in 0..w {
            let (dx, dy) = inv.apply(
                (x0 as usize + u) as f64 - pose.xc,
                (y0 as usize + v) as f64 - pose.yc,
            );
            let (sx, sy) = (tcx + dx, tcy + dy);
            for c in 0..ch {
                if let Some(s) = template.sample(sx, sy, c) {
                    values.set(u, v, c, s);
                    mask[v * w + u] = true;
                }
            }
        }
    }
    if !mask.iter().any(|&m| m) {
        return Ok(None);
    }
    Ok(Some(Footprint {
        x0: x0 as usize,
        y0: y0 as usize,
        values,
        mask,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> Image {
        Image::from_fn_gray(w, h, |x, y| ((x * 7 + y * 13) % 17) as f32 / 16.0)
    }

    fn identity_spec(img: &Image) -> WarpSpec {
        WarpSpec {
            center: ((img.width() as f64 - 1.0) / 2.0, (img.height() as f64 - 1.0) / 2.0),
            theta: 0.0,
            sx: 1.0,
            sy: 1.0,
            out_w: img.width(),
            out_h: img.height(),
        }
    }

    #[test]
    fn identity_warp() {
        let img = ramp(9, 7);
        let out = warp_affine(&img, &identity_spec(&img)).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn rotate_there_and_back() {
        let img = Image::from_fn_gray(21, 21, |x, y| {
            0.5 + 0.4 * ((x as f32 * 0.3).sin() * (y as f32 * 0.2).cos())
        });
        let mut spec = identity_spec(&img);
        spec.theta = 90.0;
        let r = warp_affine(&img, &spec).unwrap();
        spec.theta = -90.0;
        let back = warp_affine(&r, &spec).unwrap();
        for y in 2..19 {
            for x in 2..19 {
                assert!((back.get(x, y, 0) - img.get(x, y, 0)).abs() <= 0.02);
            }
        }
    }

    #[test]
    fn checkerboard_upscale() {
        let img = Image::from_fn_gray(4, 4, |x, y| ((x + y) % 2) as f32);
        let spec = WarpSpec {
            center: (1.5, 1.5),
            theta: 0.0,
            sx: 2.0,
            sy: 2.0,
            out_w: 8,
            out_h: 8,
        };
        let out = warp_affine(&img, &spec).unwrap();
        assert_eq!(out.get(0, 0, 0), img.get(0, 0, 0));
        assert_eq!(out.get(7, 7, 0), img.get(3, 3, 0));
        assert_eq!(out.get(7, 0, 0), img.get(3, 0, 0));
        // Output u samples source (u - 3.5) / 2 + 1.5, so u = 2 hits x = 0.75
        // on the clamped top row.
        assert!((out.get(2, 0, 0) - 0.75).abs() < 1e-6);
        // Interior blocks keep the 2x2 structure up to edge blending.
        assert!((out.get(4, 4, 0) - 0.5).abs() < 0.26);
    }

    #[test]
    fn warp_rejects_zero_output() {
        let img = ramp(4, 4);
        let mut s = identity_spec(&img);
        s.out_w = 0;
        assert!(warp_affine(&img, &s).is_err());
    }

    #[test]
    fn crop_examples() {
        let img = ramp(6, 5);
        assert_eq!(crop(&img, (0, 0, 6, 5)).unwrap(), img);
        let one = crop(&img, (0, 0, 1, 1)).unwrap();
        assert_eq!(one.data(), &[img.get(0, 0, 0)]);
        assert!(matches!(crop(&img, (1, 0, 6, 5)), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn resize_examples() {
        let img = ramp(5, 4);
        let same = resize_bilinear(&img, 5, 4).unwrap();
        for (a, b) in same.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
        let two = Image::from_vec(2, 1, 1, vec![0.0, 1.0]).unwrap();
        let r = resize_bilinear(&two, 4, 1).unwrap();
        assert_eq!(r.data()[0], 0.0);
        assert_eq!(r.data()[3], 1.0);
        assert!(r.data().windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0]);
        let c = Image::filled(3, 3, 3, 0.3);
        let rc = resize_bilinear(&c, 7, 5).unwrap();
        assert!(rc.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn footprint_at_identity_copies_template() {
        let t = ramp(6, 4);
        let pose = Pose::new(10.5, 8.5, 0.0, 1.0, 1.0).unwrap();
        let fp = render_footprint(&t, &pose, 30, 30).unwrap().unwrap();
        let mut canvas = Image::new(30, 30, 1);
        fp.composite_onto(&mut canvas);
        // Template center (2.5, 1.5) lands on (10.5, 8.5).
        let c = crop(&canvas, (8, 7, 6, 4)).unwrap();
        for (a, b) in c.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(fp.count(), 24);
    }

    proptest! {
        #[test]
        fn constant_image_warps_to_constant(theta in -180.0..180.0f64, s in 0.5..2.0f64,
                                            v in 0.0..1.0f32) {
            let img = Image::filled(16, 16, 1, v);
            let spec = WarpSpec { center: (7.5, 7.5), theta, sx: s, sy: s, out_w: 16, out_h: 16 };
            let out = warp_affine(&img, &spec).unwrap();
            let inv = Affine2::from_pose(theta, s, s).invert().unwrap();
            for y in 0..16 {
                for x in 0..16 {
                    let (dx, dy) = inv.apply(x as f64 - 7.5, y as f64 - 7.5);
                    let (sx, sy) = (7.5 + dx, 7.5 + dy);
                    if (0.0..=15.0).contains(&sx) && (0.0..=15.0).contains(&sy) {
                        prop_assert!((out.get(x, y, 0) - v).abs() < 1e-5);
                    }
                }
            }
        }

        #[test]
        fn bilinear_bounded_by_support(x in 0.0..7.0f64, y in 0.0..7.0f64) {
            let img = ramp(8, 8);
            let s = img.sample(x, y, 0).unwrap();
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let sup = [img.get(x0, y0, 0), img.get(x0 + 1, y0, 0),
                       img.get(x0, y0 + 1, 0), img.get(x0 + 1, y0 + 1, 0)];
            let lo = sup.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = sup.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(s >= lo - 1e-6 && s <= hi + 1e-6);
        }

        #[test]
        fn crop_paste_identity(x in 0usize..10, y in 0usize..10, w in 1usize..6, h in 1usize..6) {
            let img = ramp(16, 16);
            let patch = crop(&img, (x as i64, y as i64, w as i64, h as i64)).unwrap();
            let mut dst = Image::new(16, 16, 1);
            paste(&mut dst, &patch, x, y).unwrap();
            prop_assert_eq!(crop(&dst, (x as i64, y as i64, w as i64, h as i64)).unwrap(), patch);
        }
    }
}
