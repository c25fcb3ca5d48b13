//! Flow record → 1-channel image → row-major patch sequence.
//!
//! A record of `d` features is zero-padded at the tail to `rows·cols` and
//! reshaped row-major. Patches are taken row-major over the patch grid and
//! each patch is flattened row-major. With `d = 37` and a `2×19` image the
//! single padding zero lands at pixel `(1, 18)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub d: usize,
    pub d_padded: usize,
    pub rows: usize,
    pub cols: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
}

impl ImageSpec {
    pub fn plan(
        d: usize,
        rows: usize,
        cols: usize,
        patch_rows: usize,
        patch_cols: usize,
    ) -> Result<Self> {
        if d == 0 || rows == 0 || cols == 0 || patch_rows == 0 || patch_cols == 0 {
            return Err(Error::Geometry(format!(
                "all extents must be positive (d={d}, image {rows}x{cols}, patch {patch_rows}x{patch_cols})"
            )));
        }
        if rows * cols < d {
            return Err(Error::Geometry(format!(
                "image {rows}x{cols} holds {} values but records have {d} features",
                rows * cols
            )));
        }
        if rows % patch_rows != 0 || cols % patch_cols != 0 {
            return Err(Error::Geometry(format!(
                "patch {patch_rows}x{patch_cols} does not tile image {rows}x{cols}"
            )));
        }
        Ok(Self {
            d,
            d_padded: rows * cols,
            rows,
            cols,
            patch_rows,
            patch_cols,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.patch_rows * self.patch_cols
    }

    pub fn grid_rows(&self) -> usize {
        self.rows / self.patch_rows
    }

    pub fn grid_cols(&self) -> usize {
        self.cols / self.patch_cols
    }

    pub fn patch_count(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    /// Flat pixel index feeding each `(patch, offset)` slot, in patch-sequence order.
    pub fn patch_gather_map(&self) -> Vec<usize> {
        let mut map = Vec::with_capacity(self.d_padded);
        for gr in 0..self.grid_rows() {
            for gc in 0..self.grid_cols() {
                for pr in 0..self.patch_rows {
                    for pc in 0..self.patch_cols {
                        let r = gr * self.patch_rows + pr;
                        let c = gc * self.patch_cols + pc;
                        map.push(r * self.cols + c);
                    }
                }
            }
        }
        map
    }

    /// Patchifies every row of an `[n×d]` feature matrix in one pass,
    /// returning `[(n·patch_count)×patch_len]` with instances stacked.
    pub fn patchify_batch(&self, features: &Tensor) -> Result<Tensor> {
        if features.cols() != self.d || features.shape().len() != 2 {
            return Err(Error::dim(format!(
                "expected [n×{}] features, got {:?}",
                self.d,
                features.shape()
            )));
        }
        let map = self.patch_gather_map();
        let n = features.rows();
        let mut out = Vec::with_capacity(n * self.d_padded);
        for i in 0..n {
            let row = features.row(i);
            out.extend(map.iter().map(|&k| if k < self.d { row[k] } else { 0.0 }));
        }
        Ok(Tensor::from_parts(
            vec![n * self.patch_count(), self.patch_len()],
            out,
        ))
    }
}

/// Shorthand for [`ImageSpec::plan`].
pub fn plan_spec(d: usize, image: (usize, usize), patch: (usize, usize)) -> Result<ImageSpec> {
    ImageSpec::plan(d, image.0, image.1, patch.0, patch.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowImage {
    pub spec: ImageSpec,
    /// `[rows×cols]`
    pub pixels: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub spec: ImageSpec,
    /// `[patch_count×patch_len]`
    pub patches: Tensor,
}

pub fn to_image(x: &[f64], spec: &ImageSpec) -> Result<FlowImage> {
    if x.len() != spec.d {
        return Err(Error::dim(format!(
            "record has {} features, image spec expects {}",
            x.len(),
            spec.d
        )));
    }
    let mut pixels = x.to_vec();
    pixels.resize(spec.d_padded, 0.0);
    Ok(FlowImage {
        spec: *spec,
        pixels: Tensor::from_parts(vec![spec.rows, spec.cols], pixels),
    })
}

pub fn patchify(img: &FlowImage) -> PatchSequence {
    let spec = img.spec;
    let px = img.pixels.data();
    let data = spec.patch_gather_map().into_iter().map(|k| px[k]).collect();
    PatchSequence {
        spec,
        patches: Tensor::from_parts(vec![spec.patch_count(), spec.patch_len()], data),
    }
}

pub fn unpatchify(ps: &PatchSequence) -> FlowImage {
    let spec = ps.spec;
    let mut pixels = vec![0.0; spec.d_padded];
    for (&k, &v) in spec.patch_gather_map().iter().zip(ps.patches.data()) {
        pixels[k] = v;
    }
    FlowImage {
        spec,
        pixels: Tensor::from_parts(vec![spec.rows, spec.cols], pixels),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_configurations() {
        let cic = ImageSpec::plan(84, 6, 14, 2, 2).unwrap();
        assert_eq!((cic.patch_count(), cic.patch_len(), cic.d_padded), (21, 4, 84));
        let bot = ImageSpec::plan(37, 2, 19, 2, 1).unwrap();
        assert_eq!((bot.patch_count(), bot.patch_len(), bot.d_padded), (19, 2, 38));
        assert_eq!(ImageSpec::plan(4, 2, 2, 2, 2).unwrap().patch_count(), 1);
    }

    #[test]
    fn geometry_errors() {
        assert!(matches!(ImageSpec::plan(39, 2, 19, 2, 1), Err(Error::Geometry(_))));
        assert!(matches!(ImageSpec::plan(12, 3, 4, 2, 2), Err(Error::Geometry(_))));
    }

    #[test]
    fn pads_at_tail_row_major() {
        let spec = ImageSpec::plan(3, 2, 2, 1, 1).unwrap();
        let img = to_image(&[1.0, 2.0, 3.0], &spec).unwrap();
        assert_eq!(img.pixels.data(), &[1.0, 2.0, 3.0, 0.0]);

        let spec = ImageSpec::plan(12, 3, 4, 1, 1).unwrap();
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let img = to_image(&x, &spec).unwrap();
        assert_eq!(img.pixels.row(1), &[4.0, 5.0, 6.0, 7.0]);

        let spec = ImageSpec::plan(37, 2, 19, 2, 1).unwrap();
        let img = to_image(&[1.0; 37], &spec).unwrap();
        assert_eq!(img.pixels.data()[19 + 18], 0.0);
        assert_eq!(img.pixels.data()[19 + 17], 1.0);

        assert!(to_image(&[1.0; 36], &spec).is_err());
    }

    #[test]
    fn patch_order() {
        let spec = ImageSpec::plan(16, 4, 4, 2, 2).unwrap();
        let x: Vec<f64> = (0..16).map(f64::from).collect();
        let ps = patchify(&to_image(&x, &spec).unwrap());
        assert_eq!(ps.patches.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(ps.patches.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(ps.patches.row(3), &[10.0, 11.0, 14.0, 15.0]);

        let spec = ImageSpec::plan(38, 2, 19, 2, 1).unwrap();
        let x: Vec<f64> = (0..38).map(f64::from).collect();
        let ps = patchify(&to_image(&x, &spec).unwrap());
        for j in 0..19 {
            assert_eq!(ps.patches.row(j), &[j as f64, (19 + j) as f64]);
        }
    }

    #[test]
    fn single_patch_is_flattened_image() {
        let spec = ImageSpec::plan(5, 2, 3, 2, 3).unwrap();
        let img = to_image(&[1.0, 2.0, 3.0, 4.0, 5.0], &spec).unwrap();
        let ps = patchify(&img);
        assert_eq!(ps.patches.data(), img.pixels.data());
        assert_eq!(unpatchify(&ps), img);
    }

    #[test]
    fn batch_matches_single() {
        let spec = ImageSpec::plan(37, 2, 19, 2, 1).unwrap();
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..37).map(|j| (i * 100 + j) as f64).collect())
            .collect();
        let batch = spec.patchify_batch(&Tensor::from_rows(&rows).unwrap()).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let ps = patchify(&to_image(r, &spec).unwrap());
            assert_eq!(&batch.data()[i * 38..(i + 1) * 38], ps.patches.data());
        }
    }
}
