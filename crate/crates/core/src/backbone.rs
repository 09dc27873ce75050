//! Visual front end: a small strided conv stack turns a grayscale image
//! into a grid of d-dimensional cells, and a fixed sinusoidal table supplies
//! 2D position information. Cross-attention downstream uses the
//! position-augmented rows as keys and the raw rows as values.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{InitScheme, Linear, ParamSet};
use crate::tensor::{IndexMapPlan, Tape, Tensor};

/// Spatial features of one image. `values` is X' (one row per grid cell,
/// row-major over the H×W grid); `keys` is X̃ = X' + positions, or X'
/// itself when positions are disabled. `values` is never mutated by the
/// position add, so consumers can always get the raw rows back exactly.
pub struct FeatureMap {
    pub values: Tensor,
    pub keys: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Separable sinusoidal table: first d/2 lanes encode the row coordinate,
/// last d/2 the column, each with the usual geometric frequency ladder.
pub fn position_table(grid_h: usize, grid_w: usize, d: usize) -> Tensor {
    assert!(d % 4 == 0, "position table needs d divisible by 4");
    let half = d / 2;
    let mut data = Vec::with_capacity(grid_h * grid_w * d);
    let encode = |pos: usize, out: &mut Vec<f64>| {
        for i in 0..half / 2 {
            let omega = 1.0 / 10_000f64.powf(2.0 * i as f64 / half as f64);
            let angle = pos as f64 * omega;
            out.push(angle.sin());
            out.push(angle.cos());
        }
    };
    for r in 0..grid_h {
        for c in 0..grid_w {
            encode(r, &mut data);
            encode(c, &mut data);
        }
    }
    Tensor::from_vec(vec![grid_h * grid_w, d], data).expect("table shape consistent")
}

/// X̃ = X' + pos. Kept as a free function so the ablation path (positions
/// off) can skip it without touching X'.
pub fn add_positional(tape: &Tape, x_flat: &Tensor, pos: &Tensor) -> Result<Tensor> {
    tape.add(x_flat, pos)
}

/// 3x3 stride-2 pad-1 patch gather: rows are output cells, columns are the
/// 9·C_in kernel taps in (ky, kx, channel) order, matching the kernel
/// weight layout.
fn conv_plan(h: usize, w: usize, cin: usize) -> IndexMapPlan {
    let (ho, wo) = (h / 2, w / 2);
    let mut map = Vec::with_capacity(ho * wo * 9 * cin);
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    let ix = (2 * ox + kx) as isize - 1;
                    let inside = iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize;
                    for c in 0..cin {
                        map.push(inside.then(|| (iy as usize * w + ix as usize) * cin + c));
                    }
                }
            }
        }
    }
    IndexMapPlan::new(vec![ho * wo, 9 * cin], map)
}

pub struct Backbone {
    conv1_w: Tensor,
    conv1_b: Tensor,
    conv2_w: Tensor,
    conv2_b: Tensor,
    proj: Linear,
    plan1: Rc<IndexMapPlan>,
    plan2: Rc<IndexMapPlan>,
    pos: Option<Tensor>,
    pub image_h: usize,
    pub image_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub d: usize,
}

impl Backbone {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        image_h: usize,
        image_w: usize,
        d: usize,
        with_positions: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Backbone> {
        if image_h % 4 != 0 || image_w % 4 != 0 || image_h == 0 || image_w == 0 {
            return Err(Error::BadImageShape {
                detail: format!("{image_h}x{image_w} not divisible by the stride product 4"),
            });
        }
        let c1 = (d / 2).max(4);
        let c2 = d;
        let (h1, w1) = (image_h / 2, image_w / 2);
        let (grid_h, grid_w) = (h1 / 2, w1 / 2);
        Ok(Backbone {
            conv1_w: ps.register(&format!("{prefix}.conv1.w"), vec![9, c1], InitScheme::UniformFanin, rng),
            conv1_b: ps.register(&format!("{prefix}.conv1.b"), vec![c1], InitScheme::Zeros, rng),
            conv2_w: ps.register(&format!("{prefix}.conv2.w"), vec![9 * c1, c2], InitScheme::UniformFanin, rng),
            conv2_b: ps.register(&format!("{prefix}.conv2.b"), vec![c2], InitScheme::Zeros, rng),
            proj: Linear::new(ps, &format!("{prefix}.proj"), c2, d, rng),
            plan1: Rc::new(conv_plan(image_h, image_w, 1)),
            plan2: Rc::new(conv_plan(h1, w1, c1)),
            pos: with_positions.then(|| position_table(grid_h, grid_w, d)),
            image_h,
            image_w,
            grid_h,
            grid_w,
            d,
        })
    }

    pub fn with_positions(&self) -> bool {
        self.pos.is_some()
    }

    pub fn forward(&self, tape: &Tape, image: &Tensor) -> Result<FeatureMap> {
        let want = [self.image_h, self.image_w, 1];
        if image.shape() != want {
            return Err(Error::BadImageShape {
                detail: format!("expected {:?}, got {:?}", want, image.shape()),
            });
        }
        let flat = tape.reshape(image, vec![self.image_h * self.image_w, 1])?;

        let cols1 = tape.index_map(&flat, &self.plan1)?;
        let h1 = tape.matmul(&cols1, &self.conv1_w)?;
        let h1 = tape.gelu(&tape.add_rows(&h1, &self.conv1_b)?);

        let cols2 = tape.index_map(&h1, &self.plan2)?;
        let h2 = tape.matmul(&cols2, &self.conv2_w)?;
        let h2 = tape.gelu(&tape.add_rows(&h2, &self.conv2_b)?);

        let values = self.proj.forward(tape, &h2)?;
        let keys = match &self.pos {
            Some(pos) => add_positional(tape, &values, pos)?,
            None => values.clone(),
        };
        Ok(FeatureMap {
            values,
            keys,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
        })
    }
}
