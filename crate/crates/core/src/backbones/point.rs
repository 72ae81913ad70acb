//! Set-abstraction point encoder and feature-propagation decoder.
//!
//! Sampling and grouping depend only on coordinates, so they are computed
//! once per cloud in [`PointGeometry`] and reused across forward passes.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvStack, Init};

/// Interpolation distance floor.
pub const DIST_EPS: f64 = 1e-8;

/// Neighbours used by feature propagation.
pub const FP_NEIGHBOURS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub npoint: usize,
    pub radius: f64,
    pub nsample: usize,
}

/// Default hierarchy 2048 → 512 → 128 → 64.
pub fn default_levels() -> Vec<LevelSpec> {
    vec![
        LevelSpec {
            npoint: 512,
            radius: 0.2,
            nsample: 32,
        },
        LevelSpec {
            npoint: 128,
            radius: 0.4,
            nsample: 32,
        },
        LevelSpec {
            npoint: 64,
            radius: 0.8,
            nsample: 32,
        },
    ]
}

fn dist2(a: &Array2<f64>, i: usize, b: &Array2<f64>, j: usize) -> f64 {
    let dx = a[[i, 0]] - b[[j, 0]];
    let dy = a[[i, 1]] - b[[j, 1]];
    let dz = a[[i, 2]] - b[[j, 2]];
    dx * dx + dy * dy + dz * dz
}

/// Farthest-point sampling starting from the point nearest the centroid.
/// Ties go to the lowest index.
pub fn farthest_point_sample(coords: &Array2<f64>, m: usize) -> Vec<usize> {
    let n = coords.nrows();
    let m = m.min(n);
    if m == 0 {
        return Vec::new();
    }
    let centroid = coords.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centroid = centroid.insert_axis(ndarray::Axis(0));
    let start = (0..n)
        .min_by(|&a, &b| {
            dist2(coords, a, &centroid, 0)
                .partial_cmp(&dist2(coords, b, &centroid, 0))
                .expect("finite coordinates")
        })
        .expect("non-empty");
    let mut chosen = Vec::with_capacity(m);
    let mut nearest = vec![f64::INFINITY; n];
    let mut current = start;
    for _ in 0..m {
        chosen.push(current);
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, d) in nearest.iter_mut().enumerate() {
            let nd = dist2(coords, i, coords, current);
            if nd < *d {
                *d = nd;
            }
            if *d > best.0 {
                best = (*d, i);
            }
        }
        current = best.1;
    }
    chosen
}

/// For each centre, the first `k` points (in index order) within `radius`,
/// padded by repeating the first hit. Output is centre-major, length `m·k`.
pub fn ball_query(coords: &Array2<f64>, centres: &Array2<f64>, radius: f64, k: usize) -> Vec<u32> {
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(centres.nrows() * k);
    for c in 0..centres.nrows() {
        let start = out.len();
        for i in 0..coords.nrows() {
            if dist2(coords, i, centres, c) <= r2 {
                out.push(i as u32);
                if out.len() - start == k {
                    break;
                }
            }
        }
        if out.len() == start {
            // No neighbour in range: fall back to the nearest point.
            let nearest = (0..coords.nrows())
                .min_by(|&a, &b| dist2(coords, a, centres, c).total_cmp(&dist2(coords, b, centres, c)))
                .expect("non-empty");
            out.push(nearest as u32);
        }
        let first = out[start];
        out.resize(start + k, first);
    }
    out
}

/// Inverse-distance weights from `k` nearest `src` points for every `dst`
/// point, as `(src, dst, weight)` entries. A coincident source point gets
/// weight exactly 1.
pub fn interpolation_weights(src: &Array2<f64>, dst: &Array2<f64>, k: usize) -> Vec<(u32, u32, f64)> {
    let k = k.min(src.nrows());
    let mut entries = Vec::with_capacity(dst.nrows() * k);
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for d in 0..dst.nrows() {
        best.clear();
        for s in 0..src.nrows() {
            let dd = dist2(dst, d, src, s);
            if best.len() < k || dd < best[best.len() - 1].0 {
                let pos = best.partition_point(|&(x, _)| x <= dd);
                best.insert(pos, (dd, s));
                best.truncate(k);
            }
        }
        let dists: Vec<f64> = best.iter().map(|&(d2, _)| d2.sqrt()).collect();
        if dists[0] < DIST_EPS {
            entries.push((best[0].1 as u32, d as u32, 1.0));
            continue;
        }
        let inv: Vec<f64> = dists.iter().map(|&x| 1.0 / x.max(DIST_EPS)).collect();
        let total: f64 = inv.iter().sum();
        for (&(_, s), w) in best.iter().zip(inv) {
            entries.push((s as u32, d as u32, w / total));
        }
    }
    entries
}

/// Coordinate-only structure of the hierarchy for one cloud.
#[derive(Clone, Debug)]
pub struct PointGeometry {
    /// Level coordinates, `[n_l × 3]`, level 0 being the input cloud.
    pub coords: Vec<Array2<f64>>,
    /// Per abstraction level: grouped indices into the previous level.
    pub groups: Vec<Vec<u32>>,
    /// Per abstraction level: grouped offsets over radius, `[3 × n_l·k]`.
    pub offsets: Vec<Array2<f64>>,
    /// `interp[l]` maps level `l + 1` onto level `l`.
    pub interp: Vec<Vec<(u32, u32, f64)>>,
}

impl PointGeometry {
    pub fn build(coords: &Array2<f64>, levels: &[LevelSpec]) -> Result<Self> {
        if coords.ncols() != 3 || coords.nrows() == 0 {
            return Err(Error::Shape(format!("point cloud has shape {:?}, expected [N × 3]", coords.dim())));
        }
        let first = coords.row(0);
        let spread = coords
            .rows()
            .into_iter()
            .map(|r| (&r - &first).mapv(f64::abs).sum())
            .fold(0.0, f64::max);
        if spread.is_nan() || spread <= 1e-12 {
            return Err(Error::Encoding("degenerate point cloud: all points coincide".into()));
        }
        let mut level_coords = vec![coords.clone()];
        let mut groups = Vec::with_capacity(levels.len());
        let mut offsets = Vec::with_capacity(levels.len());
        for spec in levels {
            let prev = level_coords.last().expect("level 0");
            if spec.npoint == 0 || spec.npoint >= prev.nrows() || spec.nsample == 0 || spec.radius <= 0.0 {
                return Err(Error::Config(format!(
                    "invalid level {spec:?} after a level of {} points",
                    prev.nrows()
                )));
            }
            let idx = farthest_point_sample(prev, spec.npoint);
            let centres = prev.select(ndarray::Axis(0), &idx);
            let group = ball_query(prev, &centres, spec.radius, spec.nsample);
            let mut off = Array2::zeros((3, group.len()));
            for (col, &g) in group.iter().enumerate() {
                let c = col / spec.nsample;
                for a in 0..3 {
                    off[[a, col]] = (prev[[g as usize, a]] - centres[[c, a]]) / spec.radius;
                }
            }
            groups.push(group);
            offsets.push(off);
            level_coords.push(centres);
        }
        let interp = (0..levels.len())
            .map(|l| interpolation_weights(&level_coords[l + 1], &level_coords[l], FP_NEIGHBOURS))
            .collect();
        Ok(Self {
            coords: level_coords,
            groups,
            offsets,
            interp,
        })
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.coords.iter().map(|c| c.nrows()).collect()
    }
}

/// Feature maps of every level, `[c_l × n_l]`; level 0 holds raw coordinates.
#[derive(Clone, Debug)]
pub struct PointFeaturePyramid {
    pub features: Vec<Var>,
}

impl PointFeaturePyramid {
    /// Deepest features `F_p`.
    pub fn deepest(&self) -> Var {
        *self.features.last().expect("at least one level")
    }
}

#[derive(Clone, Debug)]
pub struct PointEncoder {
    levels: Vec<LevelSpec>,
    sa: Vec<ConvStack>,
    fp: Vec<ConvStack>,
    channels: usize,
}

impl PointEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, channels: usize, levels: &[LevelSpec]) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("point encoder needs at least one level".into()));
        }
        let widths = sa_widths(channels, levels.len());
        let mut sa = Vec::with_capacity(levels.len());
        let mut level_dims = vec![3];
        let mut prev = 0;
        for (i, w) in widths.iter().enumerate() {
            sa.push(ConvStack::new(store, init, &format!("point.sa{i}"), 3 + prev, w, true));
            prev = *w.last().expect("non-empty widths");
            level_dims.push(prev);
        }
        // Propagation runs deepest first; the stage for level l consumes the
        // upsampled features plus level l's own features.
        let mut fp = Vec::with_capacity(levels.len());
        for l in (0..levels.len()).rev() {
            let upsampled = if l + 1 == levels.len() { level_dims[l + 1] } else { channels };
            fp.push(ConvStack::new(
                store,
                init,
                &format!("point.fp{l}"),
                upsampled + level_dims[l],
                &[channels, channels],
                true,
            ));
        }
        Ok(Self {
            levels: levels.to_vec(),
            sa,
            fp,
            channels,
        })
    }

    pub fn levels(&self) -> &[LevelSpec] {
        &self.levels
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn geometry(&self, coords: &Array2<f64>) -> Result<PointGeometry> {
        PointGeometry::build(coords, &self.levels)
    }

    pub fn encode<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, geom: &PointGeometry) -> Result<PointFeaturePyramid> {
        if geom.groups.len() != self.levels.len() {
            return Err(Error::Shape(format!(
                "geometry has {} levels, encoder {}",
                geom.groups.len(),
                self.levels.len()
            )));
        }
        let raw = tape.constant(geom.coords[0].t().as_standard_layout().into_owned());
        let mut features = vec![raw];
        for (l, (spec, mlp)) in self.levels.iter().zip(&self.sa).enumerate() {
            let offsets = tape.constant(geom.offsets[l].clone());
            let input = if l == 0 {
                offsets
            } else {
                let grouped = tape.gather_cols(features[l], &geom.groups[l]);
                tape.concat_rows(&[offsets, grouped])
            };
            let h = mlp.forward(tape, store, input);
            features.push(tape.group_max(h, spec.nsample));
        }
        Ok(PointFeaturePyramid { features })
    }

    /// Propagates `deep` (`[c × n_last]`) back to full resolution, `[C × n_0]`.
    pub fn fp_upsample<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        geom: &PointGeometry,
        pyramid: &PointFeaturePyramid,
        deep: Var,
    ) -> Result<Var> {
        let sizes = geom.level_sizes();
        if pyramid.features.len() != sizes.len() {
            return Err(Error::Shape(format!(
                "pyramid has {} levels, geometry {}",
                pyramid.features.len(),
                sizes.len()
            )));
        }
        let expected = (self.fp[0].in_dim() - tape.shape(pyramid.features[sizes.len() - 2]).0, sizes[sizes.len() - 1]);
        if tape.shape(deep) != expected {
            return Err(Error::Shape(format!(
                "deep features are {:?}, expected {:?}",
                tape.shape(deep),
                expected
            )));
        }
        let mut h = deep;
        for (stage, l) in self.fp.iter().zip((0..sizes.len() - 1).rev()) {
            let skip = pyramid.features[l];
            if tape.shape(skip).1 != sizes[l] {
                return Err(Error::Shape(format!("level {l} features do not match {} points", sizes[l])));
            }
            let up = tape.sparse_mix(h, geom.interp[l].clone(), sizes[l]);
            let cat = tape.concat_rows(&[up, skip]);
            h = stage.forward(tape, store, cat);
        }
        Ok(h)
    }
}

/// Shared-MLP widths per abstraction level for `C` output channels.
fn sa_widths(c: usize, n: usize) -> Vec<Vec<usize>> {
    let w = |x: usize| x.max(8);
    let base = [
        vec![w(c / 4), w(c / 2)],
        vec![w(c / 2), w(c)],
        vec![w(c), w(c)],
    ];
    (0..n).map(|i| base[i.min(2)].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::normalize_coords;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn sphere_cloud(seed: u64, n: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Array2::zeros((n, 3));
        for mut r in a.rows_mut() {
            loop {
                let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0f64)];
                if p.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
                    r.assign(&ndarray::arr1(&p));
                    break;
                }
            }
        }
        a
    }

    #[test]
    fn pyramid_shapes() {
        let mut store = ParamStore::new();
        let enc = PointEncoder::new(&mut store, &mut Init::new(0), 16, &default_levels()).unwrap();
        let geom = enc.geometry(&sphere_cloud(1, 2048)).unwrap();
        assert_eq!(geom.level_sizes(), vec![2048, 512, 128, 64]);
        let mut tape = Tape::new();
        let pyr = enc.encode(&mut tape, &store, &geom).unwrap();
        assert_eq!(tape.shape(pyr.deepest()), (16, 64));
        let out = enc.fp_upsample(&mut tape, &store, &geom, &pyr, pyr.deepest()).unwrap();
        assert_eq!(tape.shape(out), (16, 2048));
        assert!(tape.value(out).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn degenerate_cloud_is_encoding_error() {
        let coords = Array2::from_elem((2048, 3), 0.3);
        assert!(matches!(
            PointGeometry::build(&coords, &default_levels()),
            Err(Error::Encoding(_))
        ));
    }

    #[test]
    fn fps_is_permutation_stable() {
        let cloud = sphere_cloud(4, 600);
        let mut perm: Vec<usize> = (0..600).collect();
        perm.reverse();
        perm.swap(10, 400);
        let permuted = cloud.select(ndarray::Axis(0), &perm);
        let collect = |c: &Array2<f64>| {
            let mut v: Vec<[u64; 3]> = farthest_point_sample(c, 100)
                .into_iter()
                .map(|i| [c[[i, 0]].to_bits(), c[[i, 1]].to_bits(), c[[i, 2]].to_bits()])
                .collect();
            v.sort();
            v
        };
        assert_eq!(collect(&cloud), collect(&permuted));
    }

    #[test]
    fn fps_oracle_small() {
        // Brute-force: recompute min distance to the chosen set from scratch each step.
        let cloud = sphere_cloud(9, 80);
        let got = farthest_point_sample(&cloud, 12);
        let d = |i: usize, j: usize| dist2(&cloud, i, &cloud, j);
        let c = cloud.mean_axis(ndarray::Axis(0)).unwrap();
        let mut expect = vec![(0..80)
            .min_by(|&a, &b| {
                let da: f64 = (0..3).map(|k| (cloud[[a, k]] - c[k]).powi(2)).sum();
                let db: f64 = (0..3).map(|k| (cloud[[b, k]] - c[k]).powi(2)).sum();
                da.total_cmp(&db)
            })
            .unwrap()];
        while expect.len() < 12 {
            let next = (0..80)
                .max_by(|&a, &b| {
                    let da = expect.iter().map(|&s| d(a, s)).fold(f64::INFINITY, f64::min);
                    let db = expect.iter().map(|&s| d(b, s)).fold(f64::INFINITY, f64::min);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .unwrap();
            expect.push(next);
        }
        assert_eq!(got, expect);
    }

    #[test]
    fn ball_query_respects_radius_and_padding() {
        let cloud = sphere_cloud(2, 300);
        let centres = cloud.select(ndarray::Axis(0), &[0, 5, 17]);
        let g = ball_query(&cloud, &centres, 0.3, 8);
        assert_eq!(g.len(), 24);
        for c in 0..3 {
            let members = &g[c * 8..(c + 1) * 8];
            let inside: Vec<u32> = (0..300u32)
                .filter(|&i| dist2(&cloud, i as usize, &centres, c) <= 0.09)
                .take(8)
                .collect();
            assert_eq!(&members[..inside.len()], &inside[..]);
            assert!(members[inside.len()..].iter().all(|&m| m == inside[0]));
        }
    }

    #[test]
    fn interpolation_limits() {
        let src = ndarray::array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let dst = ndarray::array![[1.0, 0.0, 0.0], [0.2, 0.2, 0.2]];
        let e = interpolation_weights(&src, &dst, 3);
        let first: Vec<_> = e.iter().filter(|t| t.1 == 0).collect();
        assert_eq!(first, vec![&(1, 0, 1.0)]);
        let total: f64 = e.iter().filter(|t| t.1 == 1).map(|t| t.2).sum();
        assert!((total - 1.0).abs() < 1e-12);

        // Interpolating a constant gives the constant.
        let mut tape = Tape::new();
        let c = tape.constant(Array2::from_elem((4, 4), 2.5));
        let out = tape.sparse_mix(c, e, 2);
        assert!(tape.value(out).iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn translation_invariant_after_normalisation() {
        let mut store = ParamStore::new();
        let enc = PointEncoder::new(&mut store, &mut Init::new(0), 16, &default_levels()).unwrap();
        let cloud = sphere_cloud(5, 2048) * 0.7;
        let shifted = &cloud + &ndarray::arr1(&[3.0, -1.0, 0.5]);
        let run = |c: &Array2<f64>| {
            let geom = enc.geometry(&normalize_coords(c)).unwrap();
            let mut tape = Tape::new();
            let pyr = enc.encode(&mut tape, &store, &geom).unwrap();
            tape.value(pyr.deepest()).clone()
        };
        let a = run(&cloud);
        let b = run(&shifted);
        let diff = (&a - &b).mapv(f64::abs).fold(0.0, |m: f64, &x| m.max(x));
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn fp_gradcheck_wrt_deep_features() {
        let levels = [
            LevelSpec {
                npoint: 32,
                radius: 0.5,
                nsample: 8,
            },
            LevelSpec {
                npoint: 8,
                radius: 0.9,
                nsample: 8,
            },
        ];
        let mut store = ParamStore::new();
        let enc = PointEncoder::new(&mut store, &mut Init::new(1), 8, &levels).unwrap();
        let geom = enc.geometry(&sphere_cloud(3, 128)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let deep0 = Array2::from_shape_simple_fn((8, 8), || rng.random_range(-1.0..1.0));
        let readout = Array2::from_shape_simple_fn((8, 128), || rng.random_range(-1.0..1.0));
        let f = |deep: &Array2<f64>| -> (f64, Option<Array2<f64>>) {
            let mut tape = Tape::new();
            let pyr = enc.encode(&mut tape, &store, &geom).unwrap();
            let d = tape.input(deep.clone());
            let out = enc.fp_upsample(&mut tape, &store, &geom, &pyr, d).unwrap();
            let r = tape.constant(readout.clone());
            let prod = tape.mul(out, r);
            let s = tape.sum(prod);
            let g = tape.backward(s);
            (tape.scalar(s), g.wrt(d).cloned())
        };
        let (_, analytic) = f(&deep0);
        let analytic = analytic.unwrap();
        let h = 1e-6;
        for i in 0..8 {
            for j in 0..8 {
                let mut p = deep0.clone();
                p[[i, j]] += h;
                let mut m = deep0.clone();
                m[[i, j]] -= h;
                let num = (f(&p).0 - f(&m).0) / (2.0 * h);
                let a = analytic[[i, j]];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-4, "({i},{j}) analytic {a} numeric {num}");
            }
        }
    }
}
