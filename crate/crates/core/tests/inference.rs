use ctxseg::inference::{sliding_predict, SlidingConfig, WindowPredictor};
use ctxseg::raster::RasterTile;
use ctxseg::windowing::{WindowGeometry, WindowPair};
use ctxseg::Result;
use ndarray::{Array2, Array3};

/// Logits depend on both the tile position (encoded in the pixel value) and
/// the position inside the window, so overlapping windows disagree.
struct Probe {
    geom: WindowGeometry,
    u: usize,
}

impl WindowPredictor for Probe {
    fn num_classes(&self) -> usize {
        self.u
    }
    fn geometry(&self) -> WindowGeometry {
        self.geom
    }
    fn predict_windows(&self, pairs: &[WindowPair]) -> Result<Vec<Array3<f32>>> {
        Ok(pairs
            .iter()
            .map(|p| {
                Array3::from_shape_fn((self.u, self.geom.local_h, self.geom.local_w), |(k, i, j)| {
                    probe_logit(p.local_image[[0, i, j]] as f64, k, i, j)
                })
            })
            .collect())
    }
}

fn probe_logit(g: f64, k: usize, i: usize, j: usize) -> f32 {
    ((0.37 * (k + 1) as f64 * g).sin() + (0.011 * (i + 2 * j) as f64 * (k + 1) as f64).cos()) as f32
}

fn offsets(len: usize, win: usize, stride: usize) -> Vec<usize> {
    let mut v = Vec::new();
    let mut o = 0;
    while o + win <= len {
        v.push(o);
        o += stride;
    }
    if *v.last().unwrap() != len - win {
        v.push(len - win);
    }
    v
}

fn check(h: usize, w: usize, local: usize, stride: usize, u: usize) {
    let geom = WindowGeometry::square(local, 3, 4);
    let tile = RasterTile::new(
        "t",
        Array3::from_shape_fn((1, h, w), |(_, i, j)| (i * w + j) as f32),
        Array2::zeros((h, w)),
    )
    .unwrap();
    let probe = Probe { geom, u };
    let cfg = SlidingConfig { stride: Some((stride, stride)), batch_size: 3, keep_logits: true };
    let pred = sliding_predict(&probe, &tile, &cfg).unwrap();
    let logits = pred.logits.unwrap();

    let mut sum = Array3::<f64>::zeros((u, h, w));
    let mut count = Array2::<f64>::zeros((h, w));
    for &r in &offsets(h, local, stride) {
        for &c in &offsets(w, local, stride) {
            for i in 0..local {
                for j in 0..local {
                    let g = ((r + i) * w + c + j) as f64;
                    for k in 0..u {
                        sum[[k, r + i, c + j]] += probe_logit(g, k, i, j) as f64;
                    }
                    count[[r + i, c + j]] += 1.0;
                }
            }
        }
    }
    assert!(count.iter().all(|&n| n >= 1.0));
    for i in 0..h {
        for j in 0..w {
            let mean: Vec<f64> = (0..u).map(|k| sum[[k, i, j]] / count[[i, j]]).collect();
            for k in 0..u {
                assert!((logits[[k, i, j]] as f64 - mean[k]).abs() < 1e-6, "({k},{i},{j})");
            }
            let best = (0..u).fold(0, |b, k| if mean[k] > mean[b] { k } else { b });
            assert_eq!(pred.classes[[i, j]] as usize, best);
        }
    }
}

#[test]
fn overlapping_windows_are_averaged() {
    check(512, 512, 256, 128, 3);
}

#[test]
fn ragged_tiles_get_a_flush_last_window() {
    check(300, 200, 64, 48, 4);
    check(130, 200, 64, 64, 2);
}

#[test]
fn prediction_covers_every_pixel_without_overlap() {
    // Stride equal to the window: plain tiling, each pixel predicted once.
    check(256, 384, 128, 128, 5);
}
