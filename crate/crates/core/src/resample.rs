//! Spatial resampling helpers shared by augmentation, CAMs and inference.

use ndarray::{Array2, Array3, Axis};

fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    let scale = src_len as f64 / dst_len as f64;
    ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64)
}

/// Bilinear resize of a `(C, H, W)` array with half-pixel centres.
///
/// Resizing to the same size is the identity.
pub fn resize_bilinear(x: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    if h == out_h && w == out_w {
        return x.clone();
    }
    let mut out = Array3::zeros((c, out_h, out_w));
    let ys: Vec<(usize, usize, f64)> = (0..out_h)
        .map(|oy| {
            let sy = source_coord(oy, h, out_h);
            let y0 = sy.floor() as usize;
            (y0, (y0 + 1).min(h - 1), sy - y0 as f64)
        })
        .collect();
    let xs: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|ox| {
            let sx = source_coord(ox, w, out_w);
            let x0 = sx.floor() as usize;
            (x0, (x0 + 1).min(w - 1), sx - x0 as f64)
        })
        .collect();
    for ch in 0..c {
        let src = x.index_axis(Axis(0), ch);
        let mut dst = out.index_axis_mut(Axis(0), ch);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
                let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
                dst[[oy, ox]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Nearest-neighbour resize of an index mask.
pub fn resize_nearest(mask: &Array2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let sy = (((oy as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
        let sx = (((ox as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
        mask[[sy, sx]]
    })
}

/// Box-filter downsample by an integer factor; edge blocks average what they cover.
pub fn downsample_area(x: &Array3<f64>, factor: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
    let mut out = Array3::zeros((c, oh, ow));
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, y1) = (oy * factor, ((oy + 1) * factor).min(h));
                let (x0, x1) = (ox * factor, ((ox + 1) * factor).min(w));
                let mut acc = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += x[[ch, y, xx]];
                    }
                }
                out[[ch, oy, ox]] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

pub fn flip_horizontal(x: &Array3<f64>) -> Array3<f64> {
    let mut out = x.clone();
    out.invert_axis(Axis(2));
    out.as_standard_layout().into_owned()
}

pub fn flip_mask(mask: &Array2<u8>) -> Array2<u8> {
    let mut out = mask.clone();
    out.invert_axis(Axis(1));
    out.as_standard_layout().into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let x = Array3::from_shape_fn((2, 5, 4), |(c, y, x)| (c * 20 + y * 4 + x) as f64);
        assert_eq!(resize_bilinear(&x, 5, 4), x);
    }

    #[test]
    fn constant_stays_constant() {
        let x = Array3::from_elem((1, 4, 4), 0.7);
        let y = resize_bilinear(&x, 9, 3);
        assert!(y.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn flip_is_involution() {
        let x = Array3::from_shape_fn((3, 4, 5), |(c, y, x)| (c * 100 + y * 10 + x) as f64);
        let f = flip_horizontal(&x);
        assert_eq!(f[[0, 0, 0]], x[[0, 0, 4]]);
        assert_eq!(flip_horizontal(&f), x);
    }

    #[test]
    fn nearest_upsample_by_two_repeats() {
        let m = Array2::from_shape_vec((2, 2), vec![1u8, 2, 3, 4]).unwrap();
        let up = resize_nearest(&m, 4, 4);
        assert_eq!(up[[0, 0]], 1);
        assert_eq!(up[[1, 1]], 1);
        assert_eq!(up[[3, 3]], 4);
        assert_eq!(resize_nearest(&up, 2, 2), m);
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let x = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| (y * 4 + x) as f64);
        let d = downsample_area(&x, 2);
        assert_eq!(d.dim(), (1, 2, 2));
        assert!((d[[0, 0, 0]] - 2.5).abs() < 1e-12);
    }
}
