//! Deterministic synthetic two-class detection corpus. Class-0 objects are
//! plain bright ellipses; class-1 objects are ellipses crossed by a dark
//! stripe — a shape cue, not a color cue, so noise and quantization cannot
//! trivially erase the distinction. Scenes add rectangular clutter, optional
//! occluding bars and Gaussian sensor noise. Images are grayscale-in-RGB
//! PNGs, annotations JSON Lines, and a manifest with SHA-256 checksums pins
//! every byte.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::{iou, BBox};
use crate::rng::seed_rng;
use crate::targets::GtBox;
use crate::tensor::Tensor;
use crate::{Error, Result, NUM_CLASSES};

/// Scene synthesis parameters. The same spec and seed always produce the
/// same bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    pub min_objects: usize,
    pub max_objects: usize,
    /// Target fraction of class-1 (striped) objects.
    pub class_balance: f64,
    /// Number of background clutter rectangles per scene.
    pub clutter: usize,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise: f64,
    /// Probability that a scene draws an occluding bar across one object.
    pub occlusion_prob: f64,
}

impl Default for SceneSpec {
    fn default() -> SceneSpec {
        SceneSpec {
            seed: 0,
            image_size: (128, 128),
            min_objects: 1,
            max_objects: 5,
            class_balance: 0.5,
            clutter: 6,
            noise: 0.03,
            occlusion_prob: 0.3,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 64 || w < 64 || h > 1024 || w > 1024 {
            return Err(Error::invalid(format!("image size {h}x{w} outside [64, 1024]")));
        }
        if self.min_objects < 1 || self.min_objects > self.max_objects || self.max_objects > 8 {
            return Err(Error::invalid(format!(
                "object count range {}..={} must sit inside 1..=8",
                self.min_objects, self.max_objects
            )));
        }
        if !(0.0..=1.0).contains(&self.class_balance) {
            return Err(Error::invalid("class balance outside [0,1]"));
        }
        if !(0.0..=0.5).contains(&self.noise) || !self.noise.is_finite() {
            return Err(Error::invalid("noise level outside [0, 0.5]"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::invalid("occlusion probability outside [0,1]"));
        }
        if self.clutter > 32 {
            return Err(Error::invalid("clutter count above 32"));
        }
        Ok(())
    }
}

/// One rendered scene: a single gray channel in [0,1], row-major, plus its
/// ground truth.
pub struct Scene {
    pub pixels: Vec<f64>,
    pub gts: Vec<GtBox>,
}

impl Scene {
    /// The scene as a `[3, h, w]` network input. Values pass through the
    /// same 8-bit quantization as the PNG writer, so an in-memory scene and
    /// its decoded file are identical.
    pub fn to_tensor(&self, image_size: (usize, usize)) -> Tensor {
        let (h, w) = image_size;
        assert_eq!(self.pixels.len(), h * w, "scene does not match the given size");
        let mut t = Tensor::zeros(&[3, h, w]);
        let data = t.data_mut();
        for (i, &p) in self.pixels.iter().enumerate() {
            let v = (p.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            data[i] = v;
            data[h * w + i] = v;
            data[2 * h * w + i] = v;
        }
        t
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    intensity: f64,
    class_id: usize,
    // Stripe marker (class 1): unit normal and offset along it, half-width.
    stripe: Option<(f64, f64, f64, f64)>,
}

impl Ellipse {
    fn bbox(&self) -> BBox {
        BBox::new(self.cx - self.rx, self.cy - self.ry, self.cx + self.rx, self.cy + self.ry)
            .expect("positive radii")
    }
}

fn fill_rect(pixels: &mut [f64], size: (usize, usize), x0: f64, y0: f64, x1: f64, y1: f64, v: f64) {
    let (h, w) = size;
    let i0 = (y0.max(0.0)) as usize;
    let i1 = (y1.min(h as f64 - 1.0)).max(0.0) as usize;
    let j0 = (x0.max(0.0)) as usize;
    let j1 = (x1.min(w as f64 - 1.0)).max(0.0) as usize;
    for i in i0..=i1.min(h - 1) {
        for j in j0..=j1.min(w - 1) {
            pixels[i * w + j] = v;
        }
    }
}

/// Render one scene. All randomness comes from `rng` in a fixed draw order.
pub fn synth_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Scene {
    let (h, w) = spec.image_size;
    let mut pixels = vec![0.0; h * w];

    // Background: base level with a gentle linear gradient.
    let base = rng.gen_range(0.18..0.30);
    let gx = rng.gen_range(-0.10..0.10) / w as f64;
    let gy = rng.gen_range(-0.10..0.10) / h as f64;
    for i in 0..h {
        for j in 0..w {
            pixels[i * w + j] = base + gx * j as f64 + gy * i as f64;
        }
    }

    // Clutter rectangles, drawn behind the objects.
    for _ in 0..spec.clutter {
        let cw = rng.gen_range(3.0..14.0);
        let ch = rng.gen_range(3.0..14.0);
        let x = rng.gen_range(0.0..w as f64 - cw);
        let y = rng.gen_range(0.0..h as f64 - ch);
        let v = rng.gen_range(0.05..0.55);
        fill_rect(&mut pixels, (h, w), x, y, x + cw, y + ch, v);
    }

    // Objects: rejection-sampled ellipses that stay 2 px inside the frame
    // and barely overlap each other.
    let n_target = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut objs: Vec<Ellipse> = Vec::new();
    for _ in 0..n_target {
        for _attempt in 0..40 {
            let rx = rng.gen_range(8.0..26.0_f64.min(w as f64 / 4.0));
            let ry = rng.gen_range(8.0..26.0_f64.min(h as f64 / 4.0));
            let cx = rng.gen_range(rx + 2.0..w as f64 - rx - 2.0);
            let cy = rng.gen_range(ry + 2.0..h as f64 - ry - 2.0);
            let cand = BBox::new(cx - rx, cy - ry, cx + rx, cy + ry).unwrap();
            if objs.iter().any(|o| iou(&cand, &o.bbox()) > 0.15) {
                continue;
            }
            let class_id = usize::from(rng.gen_bool(spec.class_balance));
            let intensity = rng.gen_range(0.62..0.92);
            let stripe = (class_id == 1).then(|| {
                let theta = rng.gen_range(0.0..std::f64::consts::PI);
                let offset = rng.gen_range(-0.25..0.25) * rx.min(ry);
                let half_width = (0.18 * rx.min(ry)).max(1.5);
                (theta.cos(), theta.sin(), offset, half_width)
            });
            objs.push(Ellipse { cx, cy, rx, ry, intensity, class_id, stripe });
            break;
        }
    }

    for o in &objs {
        let x0 = (o.cx - o.rx).floor().max(0.0) as usize;
        let x1 = ((o.cx + o.rx).ceil() as usize).min(w - 1);
        let y0 = (o.cy - o.ry).floor().max(0.0) as usize;
        let y1 = ((o.cy + o.ry).ceil() as usize).min(h - 1);
        for i in y0..=y1 {
            for j in x0..=x1 {
                let px = j as f64 + 0.5;
                let py = i as f64 + 0.5;
                let dx = (px - o.cx) / o.rx;
                let dy = (py - o.cy) / o.ry;
                if dx * dx + dy * dy > 1.0 {
                    continue;
                }
                let mut v = o.intensity;
                if let Some((nx, ny, offset, half_width)) = o.stripe {
                    let along = (px - o.cx) * nx + (py - o.cy) * ny;
                    if (along - offset).abs() <= half_width {
                        v = (o.intensity - 0.45).max(0.05);
                    }
                }
                pixels[i * w + j] = v;
            }
        }
    }

    // Occluding bar across one object, drawn on top; the label keeps the
    // full box.
    if !objs.is_empty() && rng.gen_bool(spec.occlusion_prob) {
        let oi = rng.gen_range(0..objs.len());
        let o = &objs[oi];
        let bar_h = rng.gen_range(2.0..5.0);
        let y = rng.gen_range((o.cy - o.ry).max(0.0)..(o.cy + o.ry - bar_h).max(1.0));
        let v = rng.gen_range(0.10..0.45);
        fill_rect(
            &mut pixels,
            (h, w),
            (o.cx - 1.4 * o.rx).max(0.0),
            y,
            (o.cx + 1.4 * o.rx).min(w as f64 - 1.0),
            y + bar_h,
            v,
        );
    }

    // Sensor noise, one draw per pixel.
    if spec.noise > 0.0 {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, spec.noise).expect("validated noise");
        for p in pixels.iter_mut() {
            *p += normal.sample(rng);
        }
    }
    for p in pixels.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }

    let gts = objs.iter().map(|o| GtBox { bbox: o.bbox(), class_id: o.class_id }).collect();
    Scene { pixels, gts }
}

fn to_rgb_bytes(pixels: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(pixels.len() * 3);
    for &p in pixels {
        let b = (p.clamp(0.0, 1.0) * 255.0).round() as u8;
        out.extend_from_slice(&[b, b, b]);
    }
    out
}

// ---------------------------------------------------------------------------
// On-disk corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// The train/val convention: roughly nine training images for every
/// validation image.
pub fn split_counts(total: usize) -> (usize, usize) {
    let val = (total as f64 / 10.0).round().max(1.0) as usize;
    (total - val, val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub spec: SceneSpec,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub files: Vec<FileEntry>,
}

/// One annotation record, exactly as stored in the JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub file: String,
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<usize>,
}

impl Record {
    pub fn gts(&self) -> Result<Vec<GtBox>> {
        if self.boxes.len() != self.classes.len() {
            return Err(Error::integrity(format!(
                "{}: {} boxes but {} classes",
                self.file,
                self.boxes.len(),
                self.classes.len()
            )));
        }
        self.boxes
            .iter()
            .zip(&self.classes)
            .map(|(b, &c)| {
                if c >= NUM_CLASSES {
                    return Err(Error::integrity(format!("{}: class {c} out of range", self.file)));
                }
                Ok(GtBox { bbox: BBox::new(b[0], b[1], b[2], b[3])?, class_id: c })
            })
            .collect()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_png(pixels: &[f64], size: (usize, usize)) -> Result<Vec<u8>> {
    let (h, w) = size;
    let rgb = to_rgb_bytes(pixels);
    let mut bytes = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(&mut bytes);
    image::ImageEncoder::write_image(encoder, &rgb, w as u32, h as u32, image::ColorType::Rgb8)
        .map_err(|e| Error::invalid(format!("png encode: {e}")))?;
    Ok(bytes)
}

/// Generate a corpus under `root`: PNG scenes, one `annotations.jsonl` per
/// split, and a checksummed `manifest.json`. Refuses to overwrite an
/// existing manifest.
pub fn generate(spec: &SceneSpec, root: &Path, n_train: usize, n_val: usize, n_test: usize) -> Result<Manifest> {
    spec.validate()?;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::invalid("every split needs at least one image"));
    }
    let manifest_path = root.join("manifest.json");
    if manifest_path.exists() {
        return Err(Error::invalid(format!(
            "corpus already exists at {} (remove it first)",
            manifest_path.display()
        )));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;

    let mut files = Vec::new();
    for (split, count) in [(Split::Train, n_train), (Split::Val, n_val), (Split::Test, n_test)] {
        let dir = root.join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut annotations = String::new();
        for idx in 0..count {
            let mut rng = seed_rng(spec.seed, &format!("scene/{}/{idx}", split.as_str()));
            let scene = synth_scene(spec, &mut rng);
            let file = format!("img_{idx:05}.png");
            let png = encode_png(&scene.pixels, spec.image_size)?;
            let rel = format!("{}/{}", split.as_str(), file);
            write_file(&dir.join(&file), &png)?;
            files.push(FileEntry { path: rel, sha256: sha256_hex(&png) });
            let record = Record {
                file,
                boxes: scene.gts.iter().map(|g| [g.bbox.x1, g.bbox.y1, g.bbox.x2, g.bbox.y2]).collect(),
                classes: scene.gts.iter().map(|g| g.class_id).collect(),
            };
            annotations.push_str(
                &serde_json::to_string(&record).map_err(|e| Error::invalid(format!("encode record: {e}")))?,
            );
            annotations.push('\n');
        }
        let ann_rel = format!("{}/annotations.jsonl", split.as_str());
        write_file(&dir.join("annotations.jsonl"), annotations.as_bytes())?;
        files.push(FileEntry { path: ann_rel, sha256: sha256_hex(annotations.as_bytes()) });
    }

    let manifest =
        Manifest { schema: 1, spec: spec.clone(), n_train, n_val, n_test, files };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::invalid(format!("encode manifest: {e}")))?;
    write_file(&manifest_path, manifest_json.as_bytes())?;
    Ok(manifest)
}

/// An opened, checksum-verified corpus. Records keep annotation-file order.
pub struct Corpus {
    root: PathBuf,
    pub manifest: Manifest,
    records: Vec<Vec<Record>>,
}

impl Corpus {
    /// Open a corpus and verify every file against the manifest before
    /// anything is used.
    pub fn open(root: &Path) -> Result<Corpus> {
        let manifest_path = root.join("manifest.json");
        let manifest_bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| Error::integrity(format!("manifest.json: {e}")))?;
        if manifest.schema != 1 {
            return Err(Error::integrity(format!("unsupported corpus schema {}", manifest.schema)));
        }
        for entry in &manifest.files {
            let path = root.join(&entry.path);
            let mut f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let mut bytes = Vec::new();
            f.read_to_end(&mut bytes).map_err(|e| Error::io(&path, e))?;
            let got = sha256_hex(&bytes);
            if got != entry.sha256 {
                return Err(Error::integrity(format!(
                    "checksum mismatch for {}: manifest {} file {}",
                    entry.path, entry.sha256, got
                )));
            }
        }

        let mut records = Vec::with_capacity(3);
        for split in Split::ALL {
            let rel = format!("{}/annotations.jsonl", split.as_str());
            if !manifest.files.iter().any(|f| f.path == rel) {
                return Err(Error::integrity(format!("manifest lists no {rel}")));
            }
            let path = root.join(&rel);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let mut split_records = Vec::new();
            for (ln, line) in text.lines().enumerate() {
                let record: Record = serde_json::from_str(line)
                    .map_err(|e| Error::integrity(format!("{rel}:{}: {e}", ln + 1)))?;
                record.gts()?;
                let img_rel = format!("{}/{}", split.as_str(), record.file);
                if !manifest.files.iter().any(|f| f.path == img_rel) {
                    return Err(Error::integrity(format!("{rel} references unlisted {img_rel}")));
                }
                split_records.push(record);
            }
            let expected = match split {
                Split::Train => manifest.n_train,
                Split::Val => manifest.n_val,
                Split::Test => manifest.n_test,
            };
            if split_records.len() != expected {
                return Err(Error::integrity(format!(
                    "{rel}: {} records, manifest says {expected}",
                    split_records.len()
                )));
            }
            records.push(split_records);
        }
        Ok(Corpus { root: root.to_path_buf(), manifest, records })
    }

    pub fn records(&self, split: Split) -> &[Record] {
        &self.records[split as usize]
    }

    /// Decode one image to a `[3, h, w]` tensor with values in [0, 1].
    pub fn image(&self, split: Split, file: &str) -> Result<Tensor> {
        let path = self.root.join(split.as_str()).join(file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let img = image::load_from_memory(&bytes)
            .map_err(|e| Error::integrity(format!("{}: {e}", path.display())))?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let (eh, ew) = self.manifest.spec.image_size;
        if (h, w) != (eh, ew) {
            return Err(Error::integrity(format!(
                "{}: {h}x{w} does not match corpus size {eh}x{ew}",
                path.display()
            )));
        }
        let mut t = Tensor::zeros(&[3, h, w]);
        let data = t.data_mut();
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = px.0[c] as f64 / 255.0;
            }
        }
        Ok(t)
    }

    /// Every (image, ground truth) pair of a split, eagerly decoded.
    pub fn load_split(&self, split: Split) -> Result<Vec<(Tensor, Vec<GtBox>)>> {
        self.records(split)
            .iter()
            .map(|r| Ok((self.image(split, &r.file)?, r.gts()?)))
            .collect()
    }
}
