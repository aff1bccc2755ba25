use crate::volume_io::{ScanMeta, Volume};

/// Trilinear sample at a fractional voxel index (x, y, z). Coordinates
/// outside the grid clamp to the nearest edge voxel.
pub fn sample_trilinear(v: &Volume, pos: [f64; 3]) -> f32 {
    let dims = v.dims();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut frac = [0f64; 3];
    for i in 0..3 {
        let max = (dims[i] - 1) as f64;
        let p = pos[i].clamp(0.0, max);
        let f = p.floor();
        lo[i] = f as usize;
        hi[i] = (lo[i] + 1).min(dims[i] - 1);
        frac[i] = p - f;
    }
    let c = |x: usize, y: usize, z: usize| v.at(x, y, z) as f64;
    let [fx, fy, fz] = frac;
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;

    let c00 = lerp(c(lo[0], lo[1], lo[2]), c(hi[0], lo[1], lo[2]), fx);
    let c10 = lerp(c(lo[0], hi[1], lo[2]), c(hi[0], hi[1], lo[2]), fx);
    let c01 = lerp(c(lo[0], lo[1], hi[2]), c(hi[0], lo[1], hi[2]), fx);
    let c11 = lerp(c(lo[0], hi[1], hi[2]), c(hi[0], hi[1], hi[2]), fx);
    lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz) as f32
}

/// Resamples onto a grid with `target_spacing`, sharing the input origin.
///
/// Output voxel `j` sits at world `origin + j * target_spacing`, i.e. at input
/// index `j * target / source` on each axis.
pub fn resample(v: &Volume, target_spacing: [f64; 3]) -> Volume {
    assert!(
        target_spacing.iter().all(|&s| s > 0.0),
        "target spacing must be positive"
    );
    let src = &v.meta;
    let dims: [usize; 3] = std::array::from_fn(|i| {
        ((src.dims[i] as f64 * src.spacing[i] / target_spacing[i]).round() as usize).max(1)
    });
    let ratio: [f64; 3] = std::array::from_fn(|i| target_spacing[i] / src.spacing[i]);

    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let pos = [
                    x as f64 * ratio[0],
                    y as f64 * ratio[1],
                    z as f64 * ratio[2],
                ];
                out.push(sample_trilinear(v, pos));
            }
        }
    }
    let meta = ScanMeta {
        dims,
        spacing: target_spacing,
        ..src.clone()
    };
    Volume::new(meta, out).expect("resampled voxel count matches dims")
}
