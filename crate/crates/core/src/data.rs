//! Synthetic counting scenes: anti-aliased target ellipses of one color,
//! distractor ellipses of another, background noise, exemplar boxes and
//! ground-truth densities, plus the on-disk split layout.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{encode_pgm, render_density, write_density, write_image, BBox, DensityMap, Image, DEFAULT_SIGMA};

pub const MANIFEST_NAME: &str = "manifest.tsv";
const MAX_ATTEMPTS: usize = 1000;
const SUPERSAMPLE: usize = 4;

const PALETTE: [[f64; 3]; 6] = [
    [0.90, 0.20, 0.15],
    [0.15, 0.75, 0.25],
    [0.20, 0.35, 0.95],
    [0.95, 0.85, 0.15],
    [0.85, 0.25, 0.85],
    [0.15, 0.85, 0.90],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub canvas: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
    pub distractor_min: usize,
    pub distractor_max: usize,
    pub noise: f64,
    pub k_shots: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            canvas: 64,
            n_min: 1,
            n_max: 12,
            radius_min: 2.5,
            radius_max: 4.5,
            aspect_min: 0.5,
            aspect_max: 2.0,
            distractor_min: 0,
            distractor_max: 4,
            noise: 0.05,
            k_shots: 3,
            sigma: DEFAULT_SIGMA,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.canvas == 0 {
            return err("canvas must be positive");
        }
        if self.n_min > self.n_max {
            return err("n_min exceeds n_max");
        }
        if self.distractor_min > self.distractor_max {
            return err("distractor_min exceeds distractor_max");
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return err("radius range must be positive and nonempty");
        }
        if !(self.aspect_min > 0.0 && self.aspect_min <= self.aspect_max) {
            return err("aspect range must be positive and nonempty");
        }
        if !(self.noise >= 0.0 && self.noise <= 1.0) {
            return err("noise must lie in [0, 1]");
        }
        if !(self.sigma > 0.0) {
            return err("sigma must be positive");
        }
        if self.k_shots == 0 {
            return err("k_shots must be at least 1");
        }
        // the largest ellipse must fit on the canvas
        let widest = self.radius_max * self.aspect_max.max(1.0 / self.aspect_min).sqrt();
        if Ellipse::side(widest) > self.canvas {
            return err("objects do not fit on the canvas");
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 12] = [
        "canvas",
        "n_min",
        "n_max",
        "radius_min",
        "radius_max",
        "aspect_min",
        "aspect_max",
        "distractor_min",
        "distractor_max",
        "noise",
        "sigma",
        "data_seed",
    ];

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let v = [
            self.canvas.to_string(),
            self.n_min.to_string(),
            self.n_max.to_string(),
            self.radius_min.to_string(),
            self.radius_max.to_string(),
            self.aspect_min.to_string(),
            self.aspect_max.to_string(),
            self.distractor_min.to_string(),
            self.distractor_max.to_string(),
            self.noise.to_string(),
            self.sigma.to_string(),
            self.seed.to_string(),
        ];
        Self::KEYS.iter().zip(v).map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Sets one key; returns `Ok(false)` when the key is not a scene key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Config(format!("{key}: cannot parse {value:?}"));
        let int = || value.parse::<usize>().map_err(|_| bad());
        let real = || value.parse::<f64>().map_err(|_| bad());
        match key {
            "canvas" => self.canvas = int()?,
            "n_min" => self.n_min = int()?,
            "n_max" => self.n_max = int()?,
            "radius_min" => self.radius_min = real()?,
            "radius_max" => self.radius_max = real()?,
            "aspect_min" => self.aspect_min = real()?,
            "aspect_max" => self.aspect_max = real()?,
            "distractor_min" => self.distractor_min = int()?,
            "distractor_max" => self.distractor_max = int()?,
            "noise" => self.noise = real()?,
            "sigma" => self.sigma = real()?,
            "data_seed" => self.seed = value.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub image_path: PathBuf,
    pub density_path: PathBuf,
    /// Object centers in pixel coordinates. Records parsed from a manifest
    /// carry box centers instead.
    pub centers: Vec<(f64, f64)>,
    pub boxes: Vec<BBox>,
    pub exemplars: Vec<usize>,
}

impl SceneRecord {
    pub fn count(&self) -> usize {
        self.boxes.len()
    }

    pub fn exemplar_boxes(&self) -> Vec<BBox> {
        self.exemplars.iter().map(|&i| self.boxes[i]).collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    /// Horizontal and vertical semi-axes.
    a: f64,
    b: f64,
}

impl Ellipse {
    fn extent(&self) -> f64 {
        self.a.max(self.b)
    }

    /// Side length depends only on the semi-axis, so equal axes give equal sides.
    fn side(semi: f64) -> usize {
        (2.0 * semi).ceil() as usize + 1
    }

    fn bbox(&self, canvas: usize) -> BBox {
        let start = |c: f64, semi: f64| {
            let side = Self::side(semi);
            ((c - semi).floor().max(0.0) as usize).min(canvas - side)
        };
        BBox::new(start(self.cx, self.a), start(self.cy, self.b), Self::side(self.a), Self::side(self.b))
    }

    fn paint(&self, canvas: usize, data: &mut [f64], color: &[f64; 3]) {
        let bb = self.bbox(canvas);
        let step = 1.0 / SUPERSAMPLE as f64;
        for y in bb.y..bb.y + bb.h {
            for x in bb.x..bb.x + bb.w {
                let mut inside = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) * step;
                        let py = y as f64 + (sy as f64 + 0.5) * step;
                        let u = (px - self.cx) / self.a;
                        let v = (py - self.cy) / self.b;
                        if u * u + v * v <= 1.0 {
                            inside += 1;
                        }
                    }
                }
                let cover = inside as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                if cover > 0.0 {
                    let px = &mut data[(y * canvas + x) * 3..(y * canvas + x) * 3 + 3];
                    for (p, c) in px.iter_mut().zip(color) {
                        *p = *p * (1.0 - cover) + c * cover;
                    }
                }
            }
        }
    }
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn place(spec: &SceneSpec, rng: &mut ChaCha8Rng, placed: &[Ellipse], what: &str) -> Result<Ellipse> {
    let canvas = spec.canvas as f64;
    for _ in 0..MAX_ATTEMPTS {
        let r = rng.gen_range(spec.radius_min..=spec.radius_max);
        let aspect = rng.gen_range(spec.aspect_min..=spec.aspect_max);
        let (a, b) = (r * aspect.sqrt(), r / aspect.sqrt());
        if Ellipse::side(a) > spec.canvas || Ellipse::side(b) > spec.canvas {
            continue;
        }
        let cx = rng.gen_range(a..canvas - a);
        let cy = rng.gen_range(b..canvas - b);
        let e = Ellipse { cx, cy, a, b };
        let clear = placed.iter().all(|o| {
            let d = ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt();
            d >= o.extent() + e.extent()
        });
        if clear {
            return Ok(e);
        }
    }
    Err(Error::Data(format!(
        "could not place {what} {} after {MAX_ATTEMPTS} attempts; lower the object count or radius range",
        placed.len() + 1
    )))
}

/// Renders scene `index`. Paths in the record are relative (`images/NNNNN.cvdm`).
pub fn generate_scene(spec: &SceneSpec, index: usize) -> Result<(Image, DensityMap, SceneRecord)> {
    spec.validate()?;
    let mut rng = scene_rng(spec.seed, index as u64);
    let n = rng.gen_range(spec.n_min..=spec.n_max);
    let n_distract = rng.gen_range(spec.distractor_min..=spec.distractor_max);
    let target_color = rng.gen_range(0..PALETTE.len());
    let distract_color = (target_color + rng.gen_range(1..PALETTE.len())) % PALETTE.len();
    let background = rng.gen_range(0.1..0.3);

    let mut placed = Vec::with_capacity(n + n_distract);
    for _ in 0..n {
        let e = place(spec, &mut rng, &placed, "target")?;
        placed.push(e);
    }
    for _ in 0..n_distract {
        let e = place(spec, &mut rng, &placed, "distractor")?;
        placed.push(e);
    }

    let c = spec.canvas;
    let mut data: Vec<f64> = (0..c * c * 3)
        .map(|_| (background + spec.noise * rng.gen_range(-1.0..1.0)).clamp(0.0, 1.0))
        .collect();
    for (i, e) in placed.iter().enumerate() {
        let color = if i < n { &PALETTE[target_color] } else { &PALETTE[distract_color] };
        e.paint(c, &mut data, color);
    }
    let image = Image::new(c, c, 3, data)?;

    let targets = &placed[..n];
    let centers: Vec<(f64, f64)> = targets.iter().map(|e| (e.cx, e.cy)).collect();
    let boxes: Vec<BBox> = targets.iter().map(|e| e.bbox(c)).collect();
    let k = spec.k_shots.min(n);
    let exemplars = if k == 0 { Vec::new() } else { sample(&mut rng, n, k).into_vec() };
    let density = render_density(c, c, &centers, spec.sigma)?;
    let record = SceneRecord {
        image_path: PathBuf::from(format!("images/{index:05}.cvdm")),
        density_path: PathBuf::from(format!("densities/{index:05}.cvdm")),
        centers,
        boxes,
        exemplars,
    };
    Ok((image, density, record))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSummary {
    pub records: Vec<SceneRecord>,
    /// `histogram[c]` = number of scenes with `c` targets.
    pub histogram: Vec<usize>,
}

/// Writes `n_images` scenes under `out_dir` (images, densities, grayscale
/// previews) plus `manifest.tsv`.
pub fn build_split(spec: &SceneSpec, n_images: usize, out_dir: &Path) -> Result<SplitSummary> {
    spec.validate()?;
    for sub in ["images", "densities", "previews"] {
        let p = out_dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut records = Vec::with_capacity(n_images);
    let mut histogram = vec![0; spec.n_max + 1];
    for i in 0..n_images {
        let (img, density, record) = generate_scene(spec, i)?;
        write_image(&out_dir.join(&record.image_path), &img)?;
        write_density(&out_dir.join(&record.density_path), &density)?;
        let gray: Vec<f64> = img.data().chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
        let preview = out_dir.join(format!("previews/{i:05}.pgm"));
        fs::write(&preview, encode_pgm(img.width(), img.height(), &gray)?).map_err(|e| Error::io(&preview, e))?;
        histogram[record.count()] += 1;
        records.push(record);
    }
    write_manifest(&out_dir.join(MANIFEST_NAME), &records)?;
    Ok(SplitSummary { records, histogram })
}

pub fn format_manifest(records: &[SceneRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let boxes: Vec<String> = r.boxes.iter().map(|b| format!("{},{},{},{}", b.x, b.y, b.w, b.h)).collect();
        let ex: Vec<String> = r.exemplars.iter().map(usize::to_string).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.image_path.display(),
            r.density_path.display(),
            r.count(),
            boxes.join(";"),
            ex.join(",")
        );
    }
    out
}

pub fn write_manifest(path: &Path, records: &[SceneRecord]) -> Result<()> {
    fs::write(path, format_manifest(records)).map_err(|e| Error::io(path, e))
}

fn parse_list<T, F: Fn(&str) -> Result<T>>(s: &str, sep: char, f: F) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(sep).map(f).collect()
}

/// Parses `x,y,w,h` with an error naming the offending field position.
pub fn parse_box(s: &str) -> Result<BBox> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err(Error::Data(format!("box {s:?}: expected x,y,w,h (4 fields), got {}", parts.len())));
    }
    let mut v = [0usize; 4];
    for (i, p) in parts.iter().enumerate() {
        v[i] = p.trim().parse().map_err(|_| {
            Error::Data(format!("box {s:?}: field {} ({}) is not a nonnegative integer: {p:?}", i + 1, ["x", "y", "w", "h"][i]))
        })?;
    }
    Ok(BBox::new(v[0], v[1], v[2], v[3]))
}

pub fn parse_manifest(text: &str) -> Result<Vec<SceneRecord>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let ctx = |m: String| Error::Data(format!("manifest line {}: {m}", ln + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(ctx(format!("expected 5 tab-separated fields, got {}", f.len())));
        }
        let count: usize = f[2].parse().map_err(|_| ctx(format!("bad count {:?}", f[2])))?;
        let boxes = parse_list(f[3], ';', parse_box).map_err(|e| ctx(e.to_string()))?;
        let exemplars = parse_list(f[4], ',', |s| s.parse::<usize>().map_err(|_| ctx(format!("bad exemplar index {s:?}"))))?;
        if boxes.len() != count {
            return Err(ctx(format!("count {count} but {} boxes", boxes.len())));
        }
        if let Some(bad) = exemplars.iter().find(|&&i| i >= boxes.len()) {
            return Err(ctx(format!("exemplar index {bad} out of range")));
        }
        let centers = boxes.iter().map(|b| (b.x as f64 + b.w as f64 / 2.0, b.y as f64 + b.h as f64 / 2.0)).collect();
        out.push(SceneRecord {
            image_path: PathBuf::from(f[0]),
            density_path: PathBuf::from(f[1]),
            centers,
            boxes,
            exemplars,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<SceneRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

/// Splits items by count: `low` holds counts `<= threshold`.
pub fn partition_by_count<T: Clone>(items: &[T], count: impl Fn(&T) -> f64, threshold: f64) -> (Vec<T>, Vec<T>) {
    items.iter().cloned().partition(|t| count(t) <= threshold)
}

pub fn stratify(records: &[SceneRecord], threshold: usize) -> (Vec<SceneRecord>, Vec<SceneRecord>) {
    partition_by_count(records, |r| r.count() as f64, threshold as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene() {
        let spec = SceneSpec { n_min: 0, n_max: 0, ..SceneSpec::default() };
        let (_, density, rec) = generate_scene(&spec, 0).unwrap();
        assert_eq!(rec.count(), 0);
        assert!(rec.exemplars.is_empty());
        assert_eq!(density.count(), 0.0);
    }

    #[test]
    fn square_boxes_without_aspect_jitter() {
        let spec = SceneSpec { aspect_min: 1.0, aspect_max: 1.0, n_min: 6, n_max: 6, ..SceneSpec::default() };
        for i in 0..5 {
            let (_, _, rec) = generate_scene(&spec, i).unwrap();
            for b in &rec.boxes {
                assert_eq!(b.w, b.h, "{b:?}");
            }
        }
    }

    #[test]
    fn determinism_per_index() {
        let spec = SceneSpec::default();
        let a = generate_scene(&spec, 7).unwrap();
        let b = generate_scene(&spec, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, generate_scene(&spec, 8).unwrap().0);
    }

    #[test]
    fn crowded_canvas_errors() {
        let spec = SceneSpec { canvas: 16, n_min: 40, n_max: 40, ..SceneSpec::default() };
        let err = generate_scene(&spec, 0).unwrap_err();
        assert!(err.to_string().contains("lower the object count"), "{err}");
    }

    #[test]
    fn stratify_partitions() {
        let recs: Vec<SceneRecord> = (1..=10)
            .map(|n| SceneRecord {
                image_path: PathBuf::new(),
                density_path: PathBuf::new(),
                centers: vec![(0.0, 0.0); n],
                boxes: vec![BBox::new(0, 0, 1, 1); n],
                exemplars: vec![0],
            })
            .collect();
        let (low, high) = stratify(&recs, 5);
        assert!(low.iter().all(|r| r.count() <= 5));
        assert!(high.iter().all(|r| r.count() > 5));
        assert_eq!(low.len() + high.len(), 10);
        let (l, h) = stratify(&[], 5);
        assert!(l.is_empty() && h.is_empty());
    }

    #[test]
    fn box_parse_errors_name_the_field() {
        assert_eq!(parse_box("1,2,3,4").unwrap(), BBox::new(1, 2, 3, 4));
        let e = parse_box("1,2,x,4").unwrap_err().to_string();
        assert!(e.contains("field 3"), "{e}");
        assert!(parse_box("1,2,3").is_err());
    }
}
