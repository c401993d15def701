use ndarray::Array3;
use rayon::prelude::*;

use crate::volume::Volume;

/// 3x3x3 median filter over `(scan, axial, lateral)` with replicated borders.
pub fn median_filter_3(v: &Volume) -> Volume {
    let (s, a, l) = v.data.dim();
    let src = &v.data;
    let mut out = Array3::<f32>::zeros((s, a, l));
    out.as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(a * l)
        .enumerate()
        .for_each(|(i, plane)| {
            let mut buf = [0.0f32; 27];
            for y in 0..a {
                for x in 0..l {
                    let mut n = 0;
                    for di in [i.saturating_sub(1), i, (i + 1).min(s - 1)] {
                        for dy in [y.saturating_sub(1), y, (y + 1).min(a - 1)] {
                            for dx in [x.saturating_sub(1), x, (x + 1).min(l - 1)] {
                                buf[n] = src[[di, dy, dx]];
                                n += 1;
                            }
                        }
                    }
                    let (_, m, _) = buf.select_nth_unstable_by(13, f32::total_cmp);
                    plane[y * l + x] = *m;
                }
            }
        });
    Volume {
        data: out,
        meta: v.meta.clone(),
    }
}
