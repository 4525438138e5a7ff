//! Per-level attention maps for export.

use cnnav::navigation::LEVELS;
use cnnav::{Forward, Model, ParamStore, Tape, Tensor};

/// Maps of one level at the level's native resolution, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelMaps {
    /// Stage tag: 3, 4 or 5.
    pub level: usize,
    pub side: usize,
    /// Spatial attention mask, values in (0, 1).
    pub mask: Vec<f32>,
    /// Channel-wise L2 norm of the attended features, unnormalized.
    pub energy: Vec<f32>,
}

/// Run `image` (`[3, H, W]`) through the model in inference mode and collect
/// the maps of S3, S4, S5. `None` when the model has no attention pathway.
pub fn level_maps(model: &Model, params: &ParamStore<f32>, image: &Tensor<f32>) -> cnnav::Result<Option<Vec<LevelMaps>>> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let batch = image.clone().reshape(shape)?;
    let tape = Tape::new();
    let ctx = Forward::inference(&tape, params);
    let out = model.forward(&ctx, ctx.constant(batch))?;
    let Some(nav) = out.nav else { return Ok(None) };
    let Some(masks) = nav.masks else { return Ok(None) };
    let mut maps = Vec::with_capacity(3);
    for (i, &level) in LEVELS.iter().enumerate() {
        let mask = masks.spatial[i].value();
        let attended = nav.attended[i].value();
        let [_, c, h, w] = attended.dims4("level_maps")?;
        let plane = h * w;
        let energy = (0..plane)
            .map(|p| {
                (0..c)
                    .map(|ch| {
                        let v = attended.data()[ch * plane + p] as f64;
                        v * v
                    })
                    .sum::<f64>()
                    .sqrt() as f32
            })
            .collect();
        maps.push(LevelMaps {
            level,
            side: h,
            mask: mask.data().to_vec(),
            energy,
        });
    }
    Ok(Some(maps))
}

/// Rescale to [0, 1] by min and max; a constant map becomes all 0.5.
pub fn min_max_normalize(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

/// Nearest-neighbour resize of a square `side x side` map to `out x out`.
pub fn upsample_nearest(values: &[f32], side: usize, out: usize) -> Vec<f32> {
    let mut res = Vec::with_capacity(out * out);
    for y in 0..out {
        let sy = y * side / out;
        for x in 0..out {
            res.push(values[sy * side + x * side / out]);
        }
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_spans_unit_interval() {
        assert_eq!(min_max_normalize(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn constant_map_is_mid_gray() {
        assert_eq!(min_max_normalize(&[0.7; 4]), vec![0.5; 4]);
    }

    #[test]
    fn upsample_repeats_blocks() {
        let up = upsample_nearest(&[1.0, 2.0, 3.0, 4.0], 2, 4);
        assert_eq!(
            up,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }
}
