//! Attribute-annotated corpora and N-way M-shot episode sampling.
//!
//! Two sources are supported: a procedural generator whose images visibly
//! encode their attribute vectors, and on-disk corpora described by a CSV
//! manifest plus a class attribute table.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::stream_rng;
use crate::tensor::Tensor;

/// Attribute strengths, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeVector(Vec<f64>);

impl AttributeVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("attribute value {v} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct LabeledSample {
    /// Position in the owning corpus.
    pub id: usize,
    /// `H×W×C` pixels in `[0, 1]`.
    pub image: Tensor,
    pub attributes: AttributeVector,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub samples: Vec<LabeledSample>,
    pub class_names: Vec<String>,
    pub num_attributes: usize,
    /// `[H, W, C]` shared by every image.
    pub image_shape: [usize; 3],
}

impl Corpus {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Sample ids grouped by label.
    pub fn index_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes()];
        for s in &self.samples {
            by_class[s.label].push(s.id);
        }
        by_class
    }
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub num_attributes: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub pixel_noise: f64,
    /// Each image draws its trait strengths uniformly within this distance of
    /// its class's binary attribute value.
    pub attribute_jitter: f64,
    /// Probability that an image departs from its class on any one attribute.
    pub attribute_flip: f64,
    /// Probability that an absent trait is still drawn faintly.
    pub distractor_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            samples_per_class: 100,
            num_attributes: 16,
            image_size: 32,
            seed: 0,
            pixel_noise: 0.3,
            attribute_jitter: 0.4,
            attribute_flip: 0.0,
            distractor_rate: 0.0,
        }
    }
}

impl SyntheticConfig {
    fn grid(&self) -> usize {
        (self.num_attributes as f64).sqrt().ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_attributes < 4 {
            return Err(Error::Config(format!(
                "synthetic corpus needs at least 4 attributes, got {}",
                self.num_attributes
            )));
        }
        if self.num_classes < 10 {
            return Err(Error::Config(format!(
                "synthetic corpus needs at least 10 classes, got {}",
                self.num_classes
            )));
        }
        if self.num_attributes < 64 && (1u64 << self.num_attributes) < self.num_classes as u64 {
            return Err(Error::Config(format!(
                "{} binary attributes cannot give {} classes distinct prototypes",
                self.num_attributes, self.num_classes
            )));
        }
        if self.image_size / self.grid() < 4 {
            return Err(Error::Config(format!(
                "image size {} too small for a {}×{} trait grid",
                self.image_size,
                self.grid(),
                self.grid()
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        for (name, p) in [
            ("attribute_flip", self.attribute_flip),
            ("distractor_rate", self.distractor_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Draws `num_classes` pairwise distinct binary prototypes. When the
/// attribute budget allows it, prototypes also keep a Hamming distance of at
/// least 3 from each other.
pub fn class_prototypes(cfg: &SyntheticConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, "synthetic/prototypes");
    let a = cfg.num_attributes;
    let min_distance = if a >= 8 { 3 } else { 1 };
    let mut protos: Vec<Vec<u8>> = Vec::with_capacity(cfg.num_classes);
    let mut attempts = 0usize;
    while protos.len() < cfg.num_classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Config(format!(
                "could not place {} prototypes over {a} attributes",
                cfg.num_classes
            )));
        }
        let cand: Vec<u8> = (0..a).map(|_| rng.random_range(0..2u8)).collect();
        let active = cand.iter().filter(|&&b| b == 1).count();
        if active == 0 || active == a {
            continue;
        }
        let far = protos
            .iter()
            .all(|p| p.iter().zip(&cand).filter(|(x, y)| x != y).count() >= min_distance);
        if far {
            protos.push(cand);
        }
    }
    Ok(protos
        .into_iter()
        .map(|p| p.into_iter().map(f64::from).collect())
        .collect())
}

/// Colour of each further block of 16 traits; the first block is white.
const TINTS: [[f64; 3]; 4] = [[1.0, 1.0, 1.0], [1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.3, 0.5, 1.0]];

/// Whether pixel `(u, v)` of an `n×n` cell belongs to glyph `i` (0..16).
fn glyph(i: usize, u: usize, v: usize, n: usize) -> bool {
    let h = n / 2;
    match i {
        0 => true,
        1 => u == 0 || v == 0 || u == n - 1 || v == n - 1,
        2 => u == h || u + 1 == h || v == h || v + 1 == h,
        3 => u == v || u + v == n - 1,
        4 => u % 2 == 0,
        5 => v % 2 == 0,
        6 => (u + v) % 2 == 0,
        7 => u.abs_diff(v) <= 1,
        8 => (u + v + 1).abs_diff(n) <= 1,
        9 => u < h,
        10 => v < h,
        11 => (h.saturating_sub(1)..=h).contains(&u) && (h.saturating_sub(1)..=h).contains(&v),
        12 => (u < 2 || u + 2 >= n) && (v < 2 || v + 2 >= n),
        13 => u == h || u + 1 == h,
        14 => v == h || v + 1 == h,
        _ => (u + v) % 3 == 0,
    }
}

/// Renders one image whose traits are driven by `attributes`.
///
/// Attribute `i` owns cell `i` of a `g×g` grid (`g = ceil(sqrt(A))`) and
/// draws its own glyph there (border, cross, stripes, checker, ...), so no
/// two of the first 16 traits share a shape and each stays recognisable
/// wherever it lands after pooling. Beyond 16 attributes the glyphs repeat
/// in another colour. Glyph brightness scales with the attribute strength.
pub fn render_image(attributes: &[f64], cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let s = cfg.image_size;
    let g = (attributes.len() as f64).sqrt().ceil() as usize;
    let cell = s / g;
    let noise = Normal::new(0.0, cfg.pixel_noise.max(1e-12)).expect("valid std");
    let mut img = vec![0.0; s * s * 3];
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.3));
    for p in 0..s * s {
        img[p * 3..p * 3 + 3].copy_from_slice(&base);
    }
    let margin = (cell / 8).max(1);
    let n = cell - 2 * margin;
    for (i, &strength) in attributes.iter().enumerate() {
        let mut amp = strength;
        if strength < 0.5 && rng.random_bool(cfg.distractor_rate.clamp(0.0, 1.0)) {
            amp = rng.random_range(0.25..0.6);
        }
        if amp <= 0.0 {
            continue;
        }
        let tint = TINTS[(i / 16) % TINTS.len()];
        let (cy, cx) = ((i / g) * cell, (i % g) * cell);
        let jy = rng.random_range(0..=margin) as isize - (margin / 2) as isize;
        let jx = rng.random_range(0..=margin) as isize - (margin / 2) as isize;
        for u in 0..n {
            for v in 0..n {
                if !glyph(i % 16, u, v, n) {
                    continue;
                }
                let y = (cy + margin + u) as isize + jy;
                let x = (cx + margin + v) as isize + jx;
                if y < 0 || x < 0 || y >= s as isize || x >= s as isize {
                    continue;
                }
                let px = (y as usize * s + x as usize) * 3;
                for ch in 0..3 {
                    img[px + ch] += amp * tint[ch];
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    Tensor::new(&[s, s, 3], img).expect("consistent size")
}

/// Procedurally generates a labelled corpus; identical configs give
/// identical corpora.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Corpus> {
    let protos = class_prototypes(cfg)?;
    let mut rng = stream_rng(cfg.seed, "synthetic/images");
    let mut samples = Vec::with_capacity(cfg.num_classes * cfg.samples_per_class);
    for (label, proto) in protos.iter().enumerate() {
        for _ in 0..cfg.samples_per_class {
            let attrs: Vec<f64> = proto
                .iter()
                .map(|&p| {
                    let p = if rng.random_bool(cfg.attribute_flip) { 1.0 - p } else { p };
                    let j = rng.random_range(0.0..=cfg.attribute_jitter);
                    if p >= 0.5 {
                        1.0 - j
                    } else {
                        j
                    }
                })
                .collect();
            let image = render_image(&attrs, cfg, &mut rng);
            samples.push(LabeledSample {
                id: samples.len(),
                image,
                attributes: AttributeVector::new(attrs)?,
                label,
            });
        }
    }
    Ok(Corpus {
        samples,
        class_names: (0..cfg.num_classes).map(|c| format!("class_{c:03}")).collect(),
        num_attributes: cfg.num_attributes,
        image_shape: [cfg.image_size, cfg.image_size, 3],
    })
}

// ---------------------------------------------------------------------------
// File-backed corpora
// ---------------------------------------------------------------------------

/// Parsed class attribute table.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeTable {
    pub num_attributes: usize,
    pub max_raw: f64,
    /// `(class_id, rescaled values)` in file order.
    pub rows: Vec<(String, AttributeVector)>,
}

/// Parses the attribute table format: a header line `A <count> MAX <max>`
/// followed by one `class_id v1 .. vA` row per class.
pub fn parse_attribute_table(text: &str) -> Result<AttributeTable> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("attribute file is empty".into()))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    let (a, max) = match toks.as_slice() {
        ["A", a, "MAX", m] => (
            a.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad attribute count {a:?}")))?,
            m.parse::<f64>()
                .map_err(|_| Error::Format(format!("bad maximum {m:?}")))?,
        ),
        _ => {
            return Err(Error::Format(format!(
                "attribute header must be `A <count> MAX <max>`, got {header:?}"
            )))
        }
    };
    if a == 0 || !(max > 0.0 && max.is_finite()) {
        return Err(Error::Format(format!("invalid header values A={a} MAX={max}")));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let mut toks = line.split_whitespace();
        let id = toks.next().expect("non-empty line").to_string();
        let raw: Vec<f64> = toks
            .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("row {}: bad value {t:?}", lineno + 1))))
            .collect::<Result<_>>()?;
        if raw.len() != a {
            return Err(Error::Format(format!(
                "row for class {id:?} has {} attributes, expected {a}",
                raw.len()
            )));
        }
        if let Some(v) = raw.iter().find(|v| **v < 0.0 || **v > max) {
            return Err(Error::Format(format!("class {id:?}: value {v} outside [0, {max}]")));
        }
        let values = raw.iter().map(|v| v / max).collect();
        rows.push((id, AttributeVector::new(values)?));
    }
    Ok(AttributeTable {
        num_attributes: a,
        max_raw: max,
        rows,
    })
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: String,
    class_id: String,
}

fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

/// Loads a corpus from a manifest CSV (`path,class_id`) and a class
/// attribute table. Image paths are relative to the manifest's directory.
/// Labels follow the attribute table's row order.
pub fn load_manifest(manifest_path: &Path, attributes_path: &Path) -> Result<Corpus> {
    let attr_text = fs::read_to_string(attributes_path).map_err(|e| Error::Ingest {
        path: attributes_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let table = parse_attribute_table(&attr_text)?;
    let label_of: HashMap<&str, usize> = table
        .rows
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (id.as_str(), i))
        .collect();
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(manifest_path).map_err(|e| Error::Ingest {
        path: manifest_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut samples = Vec::new();
    let mut image_shape: Option<[usize; 3]> = None;
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let label = *label_of
            .get(row.class_id.as_str())
            .ok_or_else(|| Error::Format(format!("class {:?} has no attribute row", row.class_id)))?;
        let path: PathBuf = root.join(&row.path);
        if !path.exists() {
            return Err(Error::Ingest {
                path,
                reason: "image file not found".into(),
            });
        }
        let image = load_image(&path)?;
        let shape = [image.shape()[0], image.shape()[1], image.shape()[2]];
        match image_shape {
            None => image_shape = Some(shape),
            Some(s) if s != shape => {
                return Err(Error::Format(format!(
                    "{} is {shape:?}, earlier images are {s:?}",
                    path.display()
                )))
            }
            _ => {}
        }
        samples.push(LabeledSample {
            id: samples.len(),
            image,
            attributes: table.rows[label].1.clone(),
            label,
        });
    }
    let image_shape = image_shape.ok_or_else(|| Error::Format("manifest lists no images".into()))?;
    Ok(Corpus {
        samples,
        class_names: table.rows.iter().map(|(id, _)| id.clone()).collect(),
        num_attributes: table.num_attributes,
        image_shape,
    })
}

/// Writes a corpus as 8-bit PNGs plus `manifest.csv` and `attributes.txt`.
/// Class attribute rows are the per-class mean of the sample attributes.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut manifest = csv::Writer::from_path(dir.join("manifest.csv")).map_err(|e| Error::Format(e.to_string()))?;
    manifest
        .write_record(["path", "class_id"])
        .map_err(|e| Error::Format(e.to_string()))?;
    let [h, w, _] = corpus.image_shape;
    for s in &corpus.samples {
        let rel = format!("images/{}_{:05}.png", corpus.class_names[s.label], s.id);
        let bytes: Vec<u8> = s
            .image
            .data()
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes)
            .ok_or_else(|| Error::Format("image buffer size mismatch".into()))?;
        buf.save(dir.join(&rel)).map_err(|e| Error::Format(e.to_string()))?;
        manifest
            .write_record([rel.as_str(), corpus.class_names[s.label].as_str()])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    manifest.flush()?;

    let a = corpus.num_attributes;
    let mut sums = vec![vec![0.0; a]; corpus.num_classes()];
    let mut counts = vec![0usize; corpus.num_classes()];
    for s in &corpus.samples {
        counts[s.label] += 1;
        for (acc, v) in sums[s.label].iter_mut().zip(s.attributes.values()) {
            *acc += v;
        }
    }
    let mut f = fs::File::create(dir.join("attributes.txt"))?;
    writeln!(f, "A {a} MAX 1")?;
    for (c, name) in corpus.class_names.iter().enumerate() {
        let n = counts[c].max(1) as f64;
        let vals: Vec<String> = sums[c].iter().map(|v| format!("{}", v / n)).collect();
        writeln!(f, "{name} {}", vals.join(" "))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Splits and episodes
// ---------------------------------------------------------------------------

/// Disjoint train/test class sets over one corpus.
#[derive(Clone, Debug)]
pub struct CorpusSplit {
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
    by_class: Vec<Vec<usize>>,
}

impl CorpusSplit {
    pub fn new(corpus: &Corpus, train_classes: Vec<usize>, test_classes: Vec<usize>) -> Result<Self> {
        let n = corpus.num_classes();
        if let Some(c) = train_classes.iter().chain(&test_classes).find(|&&c| c >= n) {
            return Err(Error::Config(format!("class {c} not in corpus of {n} classes")));
        }
        if let Some(c) = train_classes.iter().find(|c| test_classes.contains(c)) {
            return Err(Error::Config(format!("class {c} is in both train and test splits")));
        }
        Ok(Self {
            train_classes,
            test_classes,
            by_class: corpus.index_by_class(),
        })
    }

    /// First `num_train` classes train, the rest test.
    pub fn leading(corpus: &Corpus, num_train: usize) -> Result<Self> {
        let n = corpus.num_classes();
        if num_train >= n {
            return Err(Error::Config(format!("{num_train} train classes leaves no test classes out of {n}")));
        }
        Self::new(corpus, (0..num_train).collect(), (num_train..n).collect())
    }

    pub fn train(&self) -> ClassPool<'_> {
        ClassPool {
            classes: &self.train_classes,
            by_class: &self.by_class,
        }
    }

    pub fn test(&self) -> ClassPool<'_> {
        ClassPool {
            classes: &self.test_classes,
            by_class: &self.by_class,
        }
    }
}

/// The classes episodes may be drawn from.
#[derive(Clone, Copy, Debug)]
pub struct ClassPool<'a> {
    pub classes: &'a [usize],
    by_class: &'a [Vec<usize>],
}

impl<'a> ClassPool<'a> {
    pub fn samples_of(&self, class: usize) -> &'a [usize] {
        &self.by_class[class]
    }
}

/// One N-way M-shot task. Support and query samples are stored class-major
/// as corpus sample ids; labels are episode-local (`0..N`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub n_way: usize,
    pub m_shot: usize,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
    /// `class_map[n]` is the corpus class behind episode label `n`.
    pub class_map: Vec<usize>,
}

impl Episode {
    pub fn query_count(&self) -> usize {
        self.query.len()
    }
}

/// Samples an episode: `n_way` distinct classes, then `m_shot + q_per_class`
/// distinct samples from each.
pub fn sample_episode(
    pool: &ClassPool<'_>,
    n_way: usize,
    m_shot: usize,
    q_per_class: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if n_way == 0 || m_shot == 0 {
        return Err(Error::Sampling(format!("invalid {n_way}-way {m_shot}-shot request")));
    }
    if pool.classes.len() < n_way {
        return Err(Error::Sampling(format!(
            "{n_way}-way episode from only {} classes",
            pool.classes.len()
        )));
    }
    let need = m_shot + q_per_class;
    if let Some(&c) = pool.classes.iter().find(|&&c| pool.samples_of(c).len() < need) {
        return Err(Error::Sampling(format!(
            "class {c} has {} samples, episode needs {need}",
            pool.samples_of(c).len()
        )));
    }
    let class_map: Vec<usize> = index::sample(rng, pool.classes.len(), n_way)
        .into_iter()
        .map(|i| pool.classes[i])
        .collect();
    let mut ep = Episode {
        n_way,
        m_shot,
        support: Vec::with_capacity(n_way * m_shot),
        support_labels: Vec::with_capacity(n_way * m_shot),
        query: Vec::with_capacity(n_way * q_per_class),
        query_labels: Vec::with_capacity(n_way * q_per_class),
        class_map,
    };
    for (label, &class) in ep.class_map.iter().enumerate() {
        let ids = pool.samples_of(class);
        let picks = index::sample(rng, ids.len(), need).into_vec();
        for (k, &i) in picks.iter().enumerate() {
            if k < m_shot {
                ep.support.push(ids[i]);
                ep.support_labels.push(label);
            } else {
                ep.query.push(ids[i]);
                ep.query_labels.push(label);
            }
        }
    }
    Ok(ep)
}
