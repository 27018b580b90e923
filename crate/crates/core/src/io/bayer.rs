//! RGGB Bayer mosaics. Within each 2x2 cell: R at (0,0), G at (0,1) and
//! (1,0), B at (1,1). No other layout is accepted.

use crate::error::{shape_err, Result};
use crate::tensor::{pixel_shuffle, pixel_unshuffle, Dims, Element, Tensor};

/// `(n, 1, 2h, 2w)` mosaic to `(n, 4, h, w)` planes ordered R, G(0,1), G(1,0), B.
pub fn bayer_pack<T: Element>(raw: &Tensor<T>) -> Result<Tensor<T>> {
    let d = raw.dims();
    if d.c != 1 {
        return shape_err(format!("raw mosaic must have one channel, got {}", d.c));
    }
    if !d.h.is_multiple_of(2) || !d.w.is_multiple_of(2) {
        return shape_err(format!("raw mosaic must have even sides, got {}x{}", d.h, d.w));
    }
    pixel_unshuffle(raw, 2)
}

pub fn bayer_unpack<T: Element>(packed: &Tensor<T>) -> Result<Tensor<T>> {
    if packed.dims().c != 4 {
        return shape_err(format!("packed mosaic must have four channels, got {}", packed.dims().c));
    }
    pixel_shuffle(packed, 2)
}

/// Samples an RGB image through an RGGB color filter array.
pub fn mosaic_rggb<T: Element>(rgb: &Tensor<T>) -> Result<Tensor<T>> {
    let d = rgb.dims();
    if d.c != 3 {
        return shape_err(format!("mosaic needs an RGB image, got {} channels", d.c));
    }
    if !d.h.is_multiple_of(2) || !d.w.is_multiple_of(2) {
        return shape_err(format!("mosaic needs even sides, got {}x{}", d.h, d.w));
    }
    Ok(Tensor::from_fn(Dims::new(d.n, 1, d.h, d.w), |n, _, y, x| {
        let c = match (y % 2, x % 2) {
            (0, 0) => 0,
            (1, 1) => 2,
            _ => 1,
        };
        rgb.at(n, c, y, x)
    }))
}
