use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::coord_map;
use crate::Tensor;

/// Packs an `[H, W]` Bayer mosaic into `[4, H/2, W/2]`, channels ordered
/// by CFA phase `(0,0), (0,1), (1,0), (1,1)`.
pub fn pack_bayer(raw: &Tensor) -> Result<Tensor> {
    let (h, w) = match raw.shape() {
        [h, w] if h % 2 == 0 && w % 2 == 0 => (*h, *w),
        other => {
            return Err(Error::shape(
                "pack_bayer",
                format!("expected [H, W] with even H and W, got {other:?}"),
            ))
        }
    };
    let (h2, w2) = (h / 2, w / 2);
    let d = raw.data();
    Ok(Tensor::from_fn(&[4, h2, w2], |i| {
        let c = i / (h2 * w2);
        let p = i % (h2 * w2);
        let (r, col) = (2 * (p / w2) + c / 2, 2 * (p % w2) + c % 2);
        d[r * w + col]
    }))
}

pub fn unpack_bayer(packed: &Tensor) -> Result<Tensor> {
    let (h2, w2) = match packed.shape() {
        [4, h, w] => (*h, *w),
        other => {
            return Err(Error::shape(
                "unpack_bayer",
                format!("expected [4, H/2, W/2], got {other:?}"),
            ))
        }
    };
    let (h, w) = (2 * h2, 2 * w2);
    let d = packed.data();
    Ok(Tensor::from_fn(&[h, w], |i| {
        let (r, col) = (i / w, i % w);
        let c = 2 * (r % 2) + col % 2;
        d[(c * h2 + r / 2) * w2 + col / 2]
    }))
}

/// Overlapping square patches over an `H × W` image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilingPlan {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub overlap: f64,
    pub stride: usize,
    pub row_origins: Vec<usize>,
    pub col_origins: Vec<usize>,
}

fn axis_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = len - patch;
    let mut v: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o < last).collect();
    v.push(last);
    v
}

/// Stride `round(P·(1−overlap))`; the final origin on each axis is clamped
/// so the last patch ends at the border.
pub fn plan_tiles(height: usize, width: usize, patch: usize, overlap: f64) -> Result<TilingPlan> {
    if patch == 0 || patch > height.min(width) {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch} does not fit a {height}x{width} image"
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!("overlap must be in [0, 1), got {overlap}")));
    }
    let stride = ((patch as f64 * (1.0 - overlap)).round() as usize).max(1);
    Ok(TilingPlan {
        height,
        width,
        patch,
        overlap,
        stride,
        row_origins: axis_origins(height, patch, stride),
        col_origins: axis_origins(width, patch, stride),
    })
}

impl TilingPlan {
    /// Origins in row-major order.
    pub fn origins(&self) -> Vec<(usize, usize)> {
        self.row_origins
            .iter()
            .flat_map(|&r| self.col_origins.iter().map(move |&c| (r, c)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.row_origins.len() * self.col_origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Absolute `(row, col)` map `[2, P, P]` of the patch at `origin`.
    pub fn coords(&self, origin: (usize, usize)) -> Tensor {
        coord_map(origin, self.patch, self.patch)
    }

    /// Cuts the `[C, P, P]` patch at `origin` out of a `[C, H, W]` image.
    pub fn extract(&self, image: &Tensor, origin: (usize, usize)) -> Result<Tensor> {
        let c = self.check_image(image)?;
        let p = self.patch;
        let d = image.data();
        Ok(Tensor::from_fn(&[c, p, p], |i| {
            let (ch, r, col) = (i / (p * p), (i / p) % p, i % p);
            d[(ch * self.height + origin.0 + r) * self.width + origin.1 + col]
        }))
    }

    fn check_image(&self, image: &Tensor) -> Result<usize> {
        match image.shape() {
            [c, h, w] if (*h, *w) == (self.height, self.width) => Ok(*c),
            other => Err(Error::shape(
                "tiling",
                format!("image {other:?} does not match plan {}x{}", self.height, self.width),
            )),
        }
    }

    /// Index of the first patch (in [`origins`](Self::origins) order) that
    /// covers each pixel.
    pub fn owner_map(&self) -> Vec<usize> {
        let mut owner = vec![usize::MAX; self.height * self.width];
        for (k, (r0, c0)) in self.origins().into_iter().enumerate() {
            for r in r0..r0 + self.patch {
                for c in c0..c0 + self.patch {
                    let o = &mut owner[r * self.width + c];
                    if *o == usize::MAX {
                        *o = k;
                    }
                }
            }
        }
        owner
    }

    /// Reassembles `[C, P, P]` patches (in origin order) into `[C, H, W]`,
    /// each pixel taken from the first patch covering it.
    pub fn stitch(&self, patches: &[Tensor]) -> Result<Tensor> {
        if patches.len() != self.len() {
            return Err(Error::shape(
                "stitch",
                format!("{} patches for a plan of {}", patches.len(), self.len()),
            ));
        }
        let c = match patches[0].shape() {
            [c, p, q] if *p == self.patch && *q == self.patch => *c,
            other => return Err(Error::shape("stitch", format!("patch shape {other:?}"))),
        };
        if patches.iter().any(|p| p.shape() != patches[0].shape()) {
            return Err(Error::shape("stitch", "patches differ in shape"));
        }
        let origins = self.origins();
        let owner = self.owner_map();
        let p = self.patch;
        Ok(Tensor::from_fn(&[c, self.height, self.width], |i| {
            let ch = i / (self.height * self.width);
            let pix = i % (self.height * self.width);
            let k = owner[pix];
            let (r0, c0) = origins[k];
            let (r, col) = (pix / self.width - r0, pix % self.width - c0);
            patches[k].data()[(ch * p + r) * p + col]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;
    use proptest::prelude::*;

    #[test]
    fn pack_two_by_two() {
        let raw = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = pack_bayer(&raw).unwrap();
        assert_eq!(p.shape(), [4, 1, 1]);
        assert_eq!(p.data(), [1.0, 2.0, 3.0, 4.0]);
        assert!(pack_bayer(&Tensor::zeros(&[3, 4])).is_err());
    }

    #[test]
    fn pack_round_trip() {
        let raw = Tensor::randn(&[8, 8], 1.0, &mut Rng::new(1, 0));
        let p = pack_bayer(&raw).unwrap();
        assert_eq!(p.shape(), [4, 4, 4]);
        assert_eq!(unpack_bayer(&p).unwrap(), raw);
    }

    #[test]
    fn single_patch_and_oversize() {
        let p = plan_tiles(64, 64, 64, 0.25).unwrap();
        assert_eq!(p.origins(), [(0, 0)]);
        assert!(plan_tiles(32, 64, 40, 0.0).is_err());
        assert!(plan_tiles(64, 64, 32, 1.0).is_err());
    }

    #[test]
    fn clamped_final_origin() {
        let p = plan_tiles(1416, 2120, 512, 0.25).unwrap();
        assert_eq!(p.stride, 384);
        assert_eq!(p.row_origins, [0, 384, 768, 904]);
        assert_eq!(p.col_origins, [0, 384, 768, 1152, 1536, 1608]);
    }

    #[test]
    fn extract_and_stitch_reproduce_image() {
        let plan = plan_tiles(20, 28, 8, 0.25).unwrap();
        let img = Tensor::randn(&[2, 20, 28], 1.0, &mut Rng::new(2, 0));
        let patches: Vec<Tensor> = plan.origins().into_iter().map(|o| plan.extract(&img, o).unwrap()).collect();
        for (p, o) in patches.iter().zip(plan.origins()) {
            let c = plan.coords(o);
            assert_eq!(c.at(&[0, 0, 0]), o.0 as f64);
            assert_eq!(c.at(&[1, 7, 7]), (o.1 + 7) as f64);
            assert_eq!(p.at(&[1, 3, 5]), img.at(&[1, o.0 + 3, o.1 + 5]));
        }
        assert_eq!(plan.stitch(&patches).unwrap(), img);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn every_pixel_is_covered(h in 1usize..200, w in 1usize..200, p in 1usize..64, o in 0.0f64..0.95) {
            prop_assume!(p <= h.min(w));
            let plan = plan_tiles(h, w, p, o).unwrap();
            prop_assert!(plan.owner_map().iter().all(|&k| k != usize::MAX));
            prop_assert_eq!(*plan.row_origins.last().unwrap(), h - p);
            prop_assert!(plan.row_origins.windows(2).all(|x| x[1] > x[0] && x[1] - x[0] <= plan.stride));
        }
    }
}
