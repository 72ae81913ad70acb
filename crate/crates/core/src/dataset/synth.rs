//! Deterministic procedural dataset: parametric objects with affordance
//! regions, splat-rendered interaction images, canned reasoning answers and
//! a manifest tying them together.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, TAU};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::write_manifest;
use super::{load_manifest, write_point_annotation, ImageEntry, Manifest, PointEntry, POINTS_PER_INSTANCE};
use crate::error::{Error, Result};
use crate::render::{splat, stick_figure, Projector};

/// Built-in procedural object shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    /// Cylinder body with a torus-arc handle.
    Mug,
    /// Blade slab with a box handle.
    Knife,
    /// Closed cylinder with a torus-arc handle and a tapered spout.
    Kettle,
}

impl TemplateKind {
    pub fn name(self) -> &'static str {
        match self {
            TemplateKind::Mug => "mug",
            TemplateKind::Knife => "knife",
            TemplateKind::Kettle => "kettle",
        }
    }

    /// Geometric part an affordance lives on, if the template supports it.
    pub fn region_for(self, affordance: &str) -> Option<Region> {
        match (self, affordance) {
            (_, "grasp") => Some(Region::Handle),
            (TemplateKind::Mug, "pour") => Some(Region::Rim),
            (TemplateKind::Kettle, "pour") => Some(Region::Spout),
            (TemplateKind::Knife, "cut") => Some(Region::BladeEdge),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    Handle,
    Rim,
    Spout,
    BladeEdge,
}

impl Region {
    fn part_name(self) -> &'static str {
        match self {
            Region::Handle => "handle",
            Region::Rim => "rim",
            Region::Spout => "spout",
            Region::BladeEdge => "blade edge",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub kind: TemplateKind,
    pub affordances: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub templates: Vec<TemplateSpec>,
    pub instances_per_template: usize,
    pub images_per_cell: usize,
    pub image_size: u32,
    /// Standard deviation of the per-coordinate jitter.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let t = |kind, affs: &[&str]| TemplateSpec {
            kind,
            affordances: affs.iter().map(|s| s.to_string()).collect(),
        };
        Self {
            templates: vec![
                t(TemplateKind::Mug, &["grasp", "pour"]),
                t(TemplateKind::Knife, &["grasp", "cut"]),
                t(TemplateKind::Kettle, &["grasp", "pour"]),
            ],
            instances_per_template: 20,
            images_per_cell: 6,
            image_size: 224,
            noise: 0.004,
        }
    }
}

/// Generated geometry: points plus, per region, `(point index, centrality ∈ [0, 1])`.
#[derive(Clone, Debug)]
pub struct Shape {
    pub coords: Array2<f64>,
    pub regions: BTreeMap<Region, Vec<(usize, f64)>>,
}

impl Shape {
    /// Heatmap for a region: `0.55 + 0.45·centrality` on region points, 0 elsewhere.
    pub fn heatmap(&self, region: Region) -> Vec<f64> {
        let mut h = vec![0.0; self.coords.nrows()];
        if let Some(pts) = self.regions.get(&region) {
            for &(i, c) in pts {
                h[i] = 0.55 + 0.45 * c.clamp(0.0, 1.0);
            }
        }
        h
    }

    fn region_centre(&self, region: Region) -> [f64; 3] {
        let pts = &self.regions[&region];
        let mut c = [0.0; 3];
        let mut wsum = 0.0;
        for &(i, w) in pts {
            let w = 0.1 + w;
            for (k, ck) in c.iter_mut().enumerate() {
                *ck += w * self.coords[[i, k]];
            }
            wsum += w;
        }
        c.map(|v| v / wsum)
    }
}

struct Builder<'r> {
    rng: &'r mut ChaCha8Rng,
    points: Vec<[f64; 3]>,
    regions: BTreeMap<Region, Vec<(usize, f64)>>,
}

impl Builder<'_> {
    fn u(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }

    fn push(&mut self, p: [f64; 3], region: Option<(Region, f64)>) {
        if let Some((r, c)) = region {
            self.regions.entry(r).or_default().push((self.points.len(), c));
        }
        self.points.push(p);
    }

    fn cylinder_side(&mut self, n: usize, r: f64, h: f64, rim: Option<f64>) {
        for _ in 0..n {
            let t = self.u(0.0, TAU);
            let y = self.u(0.0, h);
            let region = rim.and_then(|band| {
                (y > h - band).then(|| (Region::Rim, (y - (h - band)) / band))
            });
            self.push([r * t.cos(), y, r * t.sin()], region);
        }
    }

    fn disk(&mut self, n: usize, r: f64, y: f64) {
        for _ in 0..n {
            let t = self.u(0.0, TAU);
            let rr = r * self.u(0.0, 1.0f64).sqrt();
            self.push([rr * t.cos(), y, rr * t.sin()], None);
        }
    }

    /// Half-torus handle in the xy-plane bulging towards +x from `(x0, yc)`.
    fn torus_handle(&mut self, n: usize, x0: f64, yc: f64, major: f64, minor: f64) {
        for _ in 0..n {
            let phi = self.u(-FRAC_PI_2 * 0.97, FRAC_PI_2 * 0.97);
            let psi = self.u(0.0, TAU);
            let (cx, cy) = (x0 + major * phi.cos(), yc + major * phi.sin());
            let radial = [phi.cos(), phi.sin(), 0.0];
            let p = [
                cx + minor * psi.cos() * radial[0],
                cy + minor * psi.cos() * radial[1],
                minor * psi.sin(),
            ];
            let centrality = 1.0 - phi.abs() / FRAC_PI_2;
            self.push(p, Some((Region::Handle, centrality)));
        }
    }

    /// Surface of an axis-aligned box, faces sampled by area.
    fn box_surface(&mut self, n: usize, lo: [f64; 3], hi: [f64; 3], region: Option<Region>) {
        let d = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        let areas = [d[1] * d[2], d[0] * d[2], d[0] * d[1]];
        let total: f64 = areas.iter().sum::<f64>() * 2.0;
        let mid_x = (lo[0] + hi[0]) / 2.0;
        for _ in 0..n {
            let mut pick = self.u(0.0, total);
            let mut axis = 0;
            while axis < 2 && pick > 2.0 * areas[axis] {
                pick -= 2.0 * areas[axis];
                axis += 1;
            }
            let mut p = [
                self.u(lo[0], hi[0]),
                self.u(lo[1], hi[1]),
                self.u(lo[2], hi[2]),
            ];
            p[axis] = if self.rng.random_bool(0.5) { lo[axis] } else { hi[axis] };
            let c = 1.0 - ((p[0] - mid_x).abs() / (d[0] / 2.0)).min(1.0);
            self.push(p, region.map(|r| (r, c)));
        }
    }

    fn finish(mut self, noise: f64) -> Shape {
        assert_eq!(self.points.len(), POINTS_PER_INSTANCE);
        let mut coords = Array2::zeros((self.points.len(), 3));
        let points = std::mem::take(&mut self.points);
        for (i, p) in points.iter().enumerate() {
            for k in 0..3 {
                coords[[i, k]] = p[k] + noise * gaussian(self.rng);
            }
        }
        Shape {
            coords,
            regions: self.regions,
        }
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Generates one random instance of a template.
pub fn generate_shape(kind: TemplateKind, rng: &mut ChaCha8Rng, noise: f64) -> Shape {
    let mut b = Builder {
        rng,
        points: Vec::with_capacity(POINTS_PER_INSTANCE),
        regions: BTreeMap::new(),
    };
    match kind {
        TemplateKind::Mug => {
            let r = b.u(0.35, 0.45);
            let h = b.u(0.8, 1.0);
            let a = b.u(0.2, 0.26);
            b.cylinder_side(1300, r, h, Some(0.12 * h));
            b.disk(250, r, 0.0);
            let yc = h * b.u(0.45, 0.55);
            b.torus_handle(498, r, yc, a, 0.045);
        }
        TemplateKind::Knife => {
            let lb = b.u(1.0, 1.3);
            let hb = b.u(0.2, 0.28);
            let t = 0.015;
            let band = 0.25 * hb;
            for _ in 0..1200 {
                let x = b.u(0.0, lb);
                let top = hb * (1.0 - 0.8 * (x / lb).powi(3));
                let y = b.u(0.0, top);
                let z = if b.rng.random_bool(0.5) { t } else { -t };
                let region = (y < band).then(|| (Region::BladeEdge, 1.0 - y / band));
                b.push([x, y, z], region);
            }
            let lh = b.u(0.45, 0.6);
            let yc = hb * 0.55;
            b.box_surface(848, [-lh, yc - 0.06, -0.04], [0.0, yc + 0.06, 0.04], Some(Region::Handle));
        }
        TemplateKind::Kettle => {
            let r = b.u(0.45, 0.55);
            let h = b.u(0.7, 0.9);
            b.cylinder_side(1000, r, h, None);
            b.disk(200, r, h);
            b.disk(150, r, 0.0);
            let a = b.u(0.25, 0.32);
            b.torus_handle(400, r, h * 0.55, a, 0.05);
            let start = [-r * 0.9, 0.35 * h, 0.0];
            let len_x = b.u(0.3, 0.4);
            let end = [-r - len_x, 0.95 * h, 0.0];
            let axis = [end[0] - start[0], end[1] - start[1], 0.0];
            let alen = (axis[0] * axis[0] + axis[1] * axis[1]).sqrt();
            let dir = [axis[0] / alen, axis[1] / alen];
            let normal = [-dir[1], dir[0]];
            for _ in 0..298 {
                let t = b.u(0.0, 1.0);
                let rad = 0.08 + t * (0.035 - 0.08);
                let psi = b.u(0.0, TAU);
                let c = [start[0] + t * axis[0], start[1] + t * axis[1]];
                let p = [
                    c[0] + rad * psi.cos() * normal[0],
                    c[1] + rad * psi.cos() * normal[1],
                    rad * psi.sin(),
                ];
                b.push(p, Some((Region::Spout, t)));
            }
        }
    }
    b.finish(noise)
}

/// Renders an interaction image: the object as grey splats and a stick
/// figure whose hand rests on the affordance region.
pub fn render_interaction(shape: &Shape, region: Region, size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let proj = Projector::fit(&shape.coords, size, 0.24);
    for r in shape.coords.rows() {
        let (x, y) = proj.project([r[0], r[1], r[2]]);
        splat(&mut img, x, y, 1, [110, 110, 110]);
    }
    let (hx, hy) = proj.project(shape.region_centre(region));
    let hand = (hx + rng.random_range(-3.0..3.0), hy + rng.random_range(-3.0..3.0));
    let side = if hx < size as f64 / 2.0 { -1.0 } else { 1.0 };
    let shoulder = (
        hand.0 + side * rng.random_range(35.0..55.0),
        hand.1 - rng.random_range(10.0..40.0),
    );
    stick_figure(&mut img, hand, shoulder, [30, 60, 200]);
    img
}

fn other_interactions(kind: TemplateKind, region: Region) -> [&'static str; 2] {
    match (kind, region) {
        (TemplateKind::Mug, Region::Handle) => [
            "A person carries the mug by its handle to the table.",
            "A person hangs the mug on a hook by its handle.",
        ],
        (TemplateKind::Mug, _) => [
            "A person drinks coffee from the rim of the mug.",
            "A person fills the mug with water through its opening.",
        ],
        (TemplateKind::Knife, Region::Handle) => [
            "A person holds the knife handle to spread butter.",
            "A person passes the knife to someone by its handle.",
        ],
        (TemplateKind::Knife, _) => [
            "A person slices bread with the sharp blade.",
            "A person chops vegetables with the blade edge.",
        ],
        (TemplateKind::Kettle, Region::Handle) => [
            "A person lifts the kettle by its handle from the stove.",
            "A person carries the kettle by its handle to the sink.",
        ],
        (TemplateKind::Kettle, _) => [
            "A person fills a teapot from the spout of the kettle.",
            "A person waters plants through the narrow spout.",
        ],
    }
}

fn geometry_sentence(kind: TemplateKind, region: Region) -> String {
    let obj = kind.name();
    match region {
        Region::Handle if kind == TemplateKind::Knife => format!(
            "The handle is a long straight grip at the end of the {obj} that fingers can wrap around, so it can be held firmly."
        ),
        Region::Handle => format!(
            "The handle is a curved loop on the side of the {obj} that fingers can wrap around, so it can be held firmly."
        ),
        Region::Rim => format!(
            "The rim is a thin circular opening at the top of the {obj}, so liquid can flow over it."
        ),
        Region::Spout => format!(
            "The spout is a narrow tapered tube near the top of the {obj} that directs liquid outward, so liquid can flow from it."
        ),
        Region::BladeEdge => format!(
            "The blade edge is a thin straight sharp edge along the bottom of the {obj}, so it can split soft material."
        ),
    }
}

fn interaction_sentence(kind: TemplateKind, affordance: &str, region: Region) -> String {
    let obj = kind.name();
    let part = region.part_name();
    match affordance {
        "grasp" => format!("The person grasps the {obj} by its {part}, wrapping the fingers around it."),
        "pour" => format!("The person tilts the {obj} so that water pours out through its {part}."),
        "cut" => format!("The person presses the {part} of the {obj} into food to cut it."),
        other => format!("The person uses the {part} of the {obj} to {other}."),
    }
}

/// The four canned answers for an image of `kind` showing `affordance`.
/// The enumeration format of the fourth answer varies with `style`.
pub fn fixture_answers(kind: TemplateKind, affordance: &str, region: Region, style: usize) -> [String; 4] {
    let obj = kind.name();
    let part = region.part_name();
    let [o1, o2] = other_interactions(kind, region);
    let fourth = match style % 3 {
        0 => format!("1. {o1}\n2. {o2}"),
        1 => format!("- {o1}\n- {o2}"),
        _ => format!(
            "{}; {}",
            o1.trim_end_matches('.'),
            o2.trim_end_matches('.')
        ),
    };
    [
        format!("The {part} of the {obj} interacts with the person."),
        geometry_sentence(kind, region),
        interaction_sentence(kind, affordance, region),
        fourth,
    ]
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes a complete synthetic dataset into `out_dir` and returns its manifest.
///
/// Layout: `points/<obj>_<i>.txt` (x y z), `labels/<obj>_<i>_<aff>.txt`
/// (x y z h), `images/<obj>_<aff>_<j>.png`, `fixtures.json` (image id →
/// four answers) and `manifest.json`.
pub fn generate_synthetic(config: &SynthConfig, out_dir: &Path, seed: u64) -> Result<Manifest> {
    if config.templates.is_empty() {
        return Err(Error::Generation("no templates configured".into()));
    }
    if config.instances_per_template == 0 || config.images_per_cell == 0 {
        return Err(Error::Generation(
            "instances_per_template and images_per_cell must be positive".into(),
        ));
    }
    if config.image_size < 32 {
        return Err(Error::Generation("image_size must be at least 32".into()));
    }
    let mut regions = Vec::new();
    for t in &config.templates {
        if t.affordances.is_empty() {
            return Err(Error::Generation(format!("template `{}` lists no affordances", t.kind.name())));
        }
        let mut rs = Vec::new();
        for a in &t.affordances {
            let r = t.kind.region_for(a).ok_or_else(|| {
                Error::Generation(format!(
                    "template `{}` has an empty region for affordance `{a}`",
                    t.kind.name()
                ))
            })?;
            rs.push(r);
        }
        regions.push(rs);
    }

    for sub in ["points", "labels", "images"] {
        ensure_dir(&out_dir.join(sub))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects = Vec::new();
    let mut affordances: Vec<String> = Vec::new();
    let mut points = Vec::new();
    let mut images = Vec::new();
    let mut fixtures: BTreeMap<String, Vec<String>> = BTreeMap::new();

    for (t, t_regions) in config.templates.iter().zip(&regions) {
        let obj = t.kind.name();
        if !objects.iter().any(|o: &String| o == obj) {
            objects.push(obj.to_string());
        }
        for a in &t.affordances {
            if !affordances.contains(a) {
                affordances.push(a.clone());
            }
        }

        for i in 0..config.instances_per_template {
            let shape = generate_shape(t.kind, &mut rng, config.noise);
            let base = format!("{obj}_{i:03}");
            let file = out_dir.join("points").join(format!("{base}.txt"));
            write_xyz(&file, &shape.coords)?;
            let mut labels = BTreeMap::new();
            for (a, &region) in t.affordances.iter().zip(t_regions) {
                let heat = shape.heatmap(region);
                if heat.iter().all(|&h| h == 0.0) {
                    return Err(Error::Generation(format!(
                        "instance {base}: region for `{a}` came out empty"
                    )));
                }
                let label = out_dir.join("labels").join(format!("{base}_{a}.txt"));
                write_point_annotation(&label, &shape.coords, &heat)?;
                labels.insert(a.clone(), label);
            }
            points.push(PointEntry {
                file,
                object: obj.to_string(),
                labels,
            });
        }

        for (a, &region) in t.affordances.iter().zip(t_regions) {
            for j in 0..config.images_per_cell {
                let shape = generate_shape(t.kind, &mut rng, config.noise);
                let img = render_interaction(&shape, region, config.image_size, &mut rng);
                let id = format!("{obj}_{a}_{j:02}");
                let file = out_dir.join("images").join(format!("{id}.png"));
                img.save(&file).map_err(|e| Error::Image {
                    path: file.clone(),
                    msg: e.to_string(),
                })?;
                let style = rng.random_range(0..3usize);
                fixtures.insert(id, fixture_answers(t.kind, a, region, style).to_vec());
                images.push(ImageEntry {
                    file,
                    object: obj.to_string(),
                    affordance: a.clone(),
                });
            }
        }
    }

    let fixture_path = out_dir.join("fixtures.json");
    let text = serde_json::to_string_pretty(&fixtures)?;
    std::fs::write(&fixture_path, text + "\n").map_err(|e| Error::io(&fixture_path, e))?;

    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        objects,
        affordances,
        points,
        images,
    };
    let manifest_path = out_dir.join("manifest.json");
    write_manifest(&manifest, &manifest_path)?;
    load_manifest(&manifest_path)
}

/// Path of the fixture answer file written by [`generate_synthetic`].
pub fn fixture_path(out_dir: &Path) -> PathBuf {
    out_dir.join("fixtures.json")
}

fn write_xyz(path: &Path, coords: &Array2<f64>) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::with_capacity(coords.nrows() * 40);
    for r in coords.rows() {
        let _ = writeln!(out, "{} {} {}", r[0], r[1], r[2]);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
