//! Procedural shapes-and-captions corpus: deterministic scene sampling on a
//! 2×2 layout, rasterization, a template caption grammar, and the on-disk
//! dataset format (JSONL records + raw f32 image files).

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ColorKind {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SizeKind {
    Small,
    Big,
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        })
    }
}

impl fmt::Display for ColorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColorKind::Red => "red",
            ColorKind::Green => "green",
            ColorKind::Blue => "blue",
            ColorKind::Yellow => "yellow",
        })
    }
}

impl fmt::Display for SizeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SizeKind::Small => "small",
            SizeKind::Big => "big",
        })
    }
}

impl ColorKind {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            ColorKind::Red => [1.0, 0.0, 0.0],
            ColorKind::Green => [0.0, 1.0, 0.0],
            ColorKind::Blue => [0.0, 0.0, 1.0],
            ColorKind::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

pub const ALL_SHAPES: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
pub const ALL_COLORS: [ColorKind; 4] = [
    ColorKind::Red,
    ColorKind::Green,
    ColorKind::Blue,
    ColorKind::Yellow,
];
pub const ALL_SIZES: [SizeKind; 2] = [SizeKind::Small, SizeKind::Big];

/// Cell on the 2×2 layout: `(row, col)`, both in `{0, 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: ColorKind,
    pub size: SizeKind,
    pub cell: Cell,
}

impl SceneObject {
    /// "a {size} {color} {shape}" noun phrase.
    pub fn noun_phrase(&self) -> String {
        format!("a {} {} {}", self.size, self.color, self.shape)
    }
}

/// 1–3 objects on the 2×2 grid, no two sharing a cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

/// Spatial relation between two occupied cells, phrased subject-first.
pub fn relation_of(a: Cell, b: Cell) -> Option<&'static str> {
    if a == b {
        return None;
    }
    if a.row == b.row {
        if a.col < b.col {
            Some("left of")
        } else {
            None // subject must be the left object
        }
    } else if a.col == b.col {
        if a.row < b.row {
            Some("above")
        } else {
            None
        }
    } else {
        Some("next to")
    }
}

impl Scene {
    /// Canonical descriptor: objects sorted by cell, attributes spelled out.
    /// Used for split partitioning and disjointness checks.
    pub fn descriptor(&self) -> String {
        let mut objs = self.objects.clone();
        objs.sort_by_key(|o| (o.cell.row, o.cell.col));
        objs.iter()
            .map(|o| format!("{} {} {}@{},{}", o.size, o.color, o.shape, o.cell.row, o.cell.col))
            .collect::<Vec<_>>()
            .join("|")
    }

    pub fn sample(rng: &mut ChaCha8Rng) -> Scene {
        let n = rng.gen_range(1..=3usize);
        let mut cells = vec![
            Cell { row: 0, col: 0 },
            Cell { row: 0, col: 1 },
            Cell { row: 1, col: 0 },
            Cell { row: 1, col: 1 },
        ];
        // partial Fisher-Yates for the object positions
        for i in 0..n {
            let j = rng.gen_range(i..cells.len());
            cells.swap(i, j);
        }
        let objects = (0..n)
            .map(|i| SceneObject {
                shape: ALL_SHAPES[rng.gen_range(0..ALL_SHAPES.len())],
                color: ALL_COLORS[rng.gen_range(0..ALL_COLORS.len())],
                size: ALL_SIZES[rng.gen_range(0..ALL_SIZES.len())],
                cell: cells[i],
            })
            .collect();
        Scene { objects }
    }
}

/// FNV-1a; the std hasher is not stable across toolchains, this is.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (expected train | val | test)"
            ))),
        }
    }
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    /// Each split owns a fixed slice of descriptor-hash space, so the scene
    /// descriptor sets of different splits are disjoint by construction.
    fn owns(self, scene: &Scene) -> bool {
        let bucket = fnv1a(scene.descriptor().as_bytes()) % 10;
        match self {
            Split::Train => bucket < 6,
            Split::Val => (6..8).contains(&bucket),
            Split::Test => bucket >= 8,
        }
    }
}

fn mix(seed: u64, split: Split, index: u64) -> u64 {
    // splitmix64 over the packed identity of the sample
    let mut z = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(split.index().wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(index.wrapping_mul(0x94d049bb133111eb))
        .wrapping_add(0x2545f4914f6cdd1d);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic scene for `(seed, split, index)`: rejection-samples until a
/// scene in the split's own hash bucket appears.
pub fn scene_for(seed: u64, split: Split, index: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, split, index));
    loop {
        let scene = Scene::sample(&mut rng);
        if split.owns(&scene) {
            return scene;
        }
    }
}

const SMALL_RADIUS: f64 = 0.11;
const BIG_RADIUS: f64 = 0.20;
pub const BACKGROUND: f64 = 0.5;

fn covers(obj: &SceneObject, u: f64, v: f64) -> bool {
    let cx = obj.cell.col as f64 * 0.5 + 0.25;
    let cy = obj.cell.row as f64 * 0.5 + 0.25;
    let r = match obj.size {
        SizeKind::Small => SMALL_RADIUS,
        SizeKind::Big => BIG_RADIUS,
    };
    let (dx, dy) = (u - cx, v - cy);
    match obj.shape {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
        ShapeKind::Triangle => {
            // upward triangle: apex (cy − r), base at (cy + r)
            if dy < -r || dy > r {
                return false;
            }
            let half_width = r * (dy + r) / (2.0 * r);
            dx.abs() <= half_width
        }
    }
}

/// Rasterize onto a uniform gray background. Output is `[res, res, 3]` in
/// `[0,1]`; pixel centers sample the unit square, so the same scene at two
/// resolutions differs only by scale.
pub fn render(scene: &Scene, resolution: usize) -> Result<Tensor> {
    if resolution == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let mut data = vec![BACKGROUND; resolution * resolution * 3];
    for y in 0..resolution {
        let v = (y as f64 + 0.5) / resolution as f64;
        for x in 0..resolution {
            let u = (x as f64 + 0.5) / resolution as f64;
            for obj in &scene.objects {
                if covers(obj, u, v) {
                    let rgb = obj.color.rgb();
                    let base = (y * resolution + x) * 3;
                    data[base..base + 3].copy_from_slice(&rgb);
                    break; // cells are disjoint, first hit wins
                }
            }
        }
    }
    Tensor::new(vec![resolution, resolution, 3], data)
}

const PREFIXES: [&str; 2] = ["", "there is "];

/// One caption for the scene, template-based. Multi-object scenes describe an
/// ordered pair whose relation is phrased from cell geometry.
pub fn caption_grammar(scene: &Scene, rng: &mut ChaCha8Rng) -> String {
    let prefix = PREFIXES[rng.gen_range(0..PREFIXES.len())];
    if scene.objects.len() == 1 {
        return format!("{prefix}{}", scene.objects[0].noun_phrase());
    }
    // choose an unordered pair, then orient it so the relation is valid
    let n = scene.objects.len();
    let i = rng.gen_range(0..n);
    let j = (i + 1 + rng.gen_range(0..n - 1)) % n;
    let (a, b) = (&scene.objects[i], &scene.objects[j]);
    let (subj, obj, rel) = match relation_of(a.cell, b.cell) {
        Some("next to") => {
            if rng.gen_bool(0.5) {
                (a, b, "next to")
            } else {
                (b, a, "next to")
            }
        }
        Some(rel) => (a, b, rel),
        None => (b, a, relation_of(b.cell, a.cell).expect("one orientation is valid")),
    };
    format!("{prefix}{} {rel} {}", subj.noun_phrase(), obj.noun_phrase())
}

/// At least `want` distinct reference captions (never fewer than 2).
pub fn captions_for(scene: &Scene, rng: &mut ChaCha8Rng, want: usize) -> Vec<String> {
    let want = want.max(2);
    let mut out: Vec<String> = Vec::new();
    for _ in 0..200 {
        let c = caption_grammar(scene, rng);
        if !out.contains(&c) {
            out.push(c);
            if out.len() == want {
                break;
            }
        }
    }
    out
}

/// Fully generated sample: rendered image plus its reference captions.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub scene: Scene,
    pub image: Tensor,
    pub captions: Vec<String>,
}

pub fn generate_sample(
    seed: u64,
    split: Split,
    index: u64,
    resolution: usize,
    captions_per_image: usize,
) -> Result<SyntheticSample> {
    let scene = scene_for(seed, split, index);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, split, index) ^ 0xc0ffee);
    let captions = captions_for(&scene, &mut rng, captions_per_image);
    let image = render(&scene, resolution)?;
    Ok(SyntheticSample {
        scene,
        image,
        captions,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub seed: u64,
    pub resolution: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub captions_per_image: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub captions: Vec<String>,
    pub image_file: String,
}

fn write_f32_image(path: &Path, image: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(image.data.len() * 4);
    for &v in &image.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a raw little-endian f32 image file back into an f64 tensor.
pub fn read_f32_image(path: &Path, resolution: usize) -> Result<Tensor> {
    let expected = resolution * resolution * 3 * 4;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: expected {expected} bytes ({resolution}x{resolution}x3 f32), got {}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(vec![resolution, resolution, 3], data)
}

/// Generate and serialize all three splits under `out_dir`. The result is a
/// pure function of the header fields; reruns are byte-identical.
pub fn make_dataset(out_dir: &Path, header: &DatasetHeader) -> Result<()> {
    if header.n_train == 0 || header.n_val == 0 || header.n_test == 0 {
        return Err(Error::Config("split counts must be positive".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let header_path = out_dir.join("header.json");
    let body = serde_json::to_string_pretty(header)
        .map_err(|e| Error::Data(format!("header serialization: {e}")))?;
    std::fs::write(&header_path, body + "\n")
        .map_err(|e| Error::io(header_path.display().to_string(), e))?;

    for (split, count) in [
        (Split::Train, header.n_train),
        (Split::Val, header.n_val),
        (Split::Test, header.n_test),
    ] {
        let img_dir = out_dir.join(split.tag());
        std::fs::create_dir_all(&img_dir)
            .map_err(|e| Error::io(img_dir.display().to_string(), e))?;
        let jsonl_path = out_dir.join(format!("{}.jsonl", split.tag()));
        let mut jsonl = std::io::BufWriter::new(
            std::fs::File::create(&jsonl_path)
                .map_err(|e| Error::io(jsonl_path.display().to_string(), e))?,
        );
        for index in 0..count {
            let sample = generate_sample(
                header.seed,
                split,
                index as u64,
                header.resolution,
                header.captions_per_image,
            )?;
            let id = format!("{}-{index:05}", split.tag());
            let image_file = format!("{}/{id}.f32", split.tag());
            write_f32_image(&out_dir.join(&image_file), &sample.image)?;
            let record = DatasetRecord {
                id,
                captions: sample.captions,
                image_file,
            };
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::Data(format!("record serialization: {e}")))?;
            writeln!(jsonl, "{line}")
                .map_err(|e| Error::io(jsonl_path.display().to_string(), e))?;
        }
    }
    Ok(())
}

/// One split loaded into memory (images decoded lazily or eagerly).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub resolution: usize,
    pub records: Vec<DatasetRecord>,
    root: PathBuf,
}

impl Dataset {
    pub fn load(dir: &Path, split: Split) -> Result<Dataset> {
        let header_path = dir.join("header.json");
        let header: DatasetHeader = serde_json::from_str(
            &std::fs::read_to_string(&header_path)
                .map_err(|e| Error::io(header_path.display().to_string(), e))?,
        )
        .map_err(|e| Error::Data(format!("{}: {e}", header_path.display())))?;
        let jsonl_path = dir.join(format!("{}.jsonl", split.tag()));
        let text = std::fs::read_to_string(&jsonl_path)
            .map_err(|e| Error::io(jsonl_path.display().to_string(), e))?;
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let rec: DatasetRecord = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("{}: {e}", jsonl_path.display())))?;
            if rec.captions.is_empty() {
                return Err(Error::Data(format!("record {} has no captions", rec.id)));
            }
            records.push(rec);
        }
        Ok(Dataset {
            resolution: header.resolution,
            records,
            root: dir.to_path_buf(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image(&self, index: usize) -> Result<Tensor> {
        read_f32_image(&self.root.join(&self.records[index].image_file), self.resolution)
    }

    /// Decode every image up front (training touches them each epoch).
    pub fn images(&self) -> Result<Vec<Tensor>> {
        (0..self.len()).map(|i| self.image(i)).collect()
    }

    pub fn all_captions(&self) -> Vec<String> {
        self.records
            .iter()
            .flat_map(|r| r.captions.iter().cloned())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn empty_scene_renders_background() {
        let img = render(&Scene { objects: vec![] }, 32).unwrap();
        assert!(img.data.iter().all(|&v| v == BACKGROUND));
    }

    #[test]
    fn object_pixels_stay_in_their_quadrant() {
        let scene = Scene {
            objects: vec![SceneObject {
                shape: ShapeKind::Circle,
                color: ColorKind::Red,
                size: SizeKind::Big,
                cell: Cell { row: 0, col: 0 },
            }],
        };
        let img = render(&scene, 32).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let base = (y * 32 + x) * 3;
                let px = &img.data[base..base + 3];
                if px != [BACKGROUND; 3] {
                    assert!(y < 16 && x < 16, "red pixel outside quadrant at ({y},{x})");
                    assert_eq!(px, [1.0, 0.0, 0.0]);
                }
            }
        }
        // the object actually drew something
        assert!(img.data.iter().any(|&v| v != BACKGROUND));
    }

    #[test]
    fn downsampled_render_matches_coarse_render() {
        // render(s,32) vs 2x2-average of render(s,64): within 0.1 on >=90% of pixels
        for idx in 0..5u64 {
            let scene = scene_for(0, Split::Train, idx);
            let lo = render(&scene, 32).unwrap();
            let hi = render(&scene, 64).unwrap();
            let mut ok = 0usize;
            let mut total = 0usize;
            for y in 0..32 {
                for x in 0..32 {
                    for ch in 0..3 {
                        let mut acc = 0.0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                acc += hi.data[((2 * y + dy) * 64 + 2 * x + dx) * 3 + ch];
                            }
                        }
                        let pooled = acc / 4.0;
                        let v = lo.data[(y * 32 + x) * 3 + ch];
                        total += 1;
                        if (pooled - v).abs() <= 0.1 {
                            ok += 1;
                        }
                    }
                }
            }
            assert!(
                ok as f64 >= 0.9 * total as f64,
                "scene {idx}: only {ok}/{total} pixels agree"
            );
        }
    }

    #[test]
    fn single_object_caption_template() {
        let scene = Scene {
            objects: vec![SceneObject {
                shape: ShapeKind::Circle,
                color: ColorKind::Red,
                size: SizeKind::Big,
                cell: Cell { row: 0, col: 0 },
            }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let caps = captions_for(&scene, &mut rng, 2);
        assert!(caps.contains(&"a big red circle".to_string()), "{caps:?}");
        assert!(caps.contains(&"there is a big red circle".to_string()));
    }

    #[test]
    fn two_object_caption_contains_both_phrases_and_relation() {
        let scene = Scene {
            objects: vec![
                SceneObject {
                    shape: ShapeKind::Square,
                    color: ColorKind::Blue,
                    size: SizeKind::Small,
                    cell: Cell { row: 0, col: 0 },
                },
                SceneObject {
                    shape: ShapeKind::Circle,
                    color: ColorKind::Red,
                    size: SizeKind::Big,
                    cell: Cell { row: 0, col: 1 },
                },
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cap = caption_grammar(&scene, &mut rng);
        assert!(cap.contains("a small blue square"), "{cap}");
        assert!(cap.contains("a big red circle"), "{cap}");
        assert!(cap.contains("left of"), "{cap}");
    }

    #[test]
    fn captions_give_at_least_two_distinct_references() {
        for idx in 0..50u64 {
            let scene = scene_for(7, Split::Train, idx);
            let mut rng = ChaCha8Rng::seed_from_u64(idx);
            let caps = captions_for(&scene, &mut rng, 2);
            let distinct: HashSet<&String> = caps.iter().collect();
            assert!(distinct.len() >= 2, "scene {idx}: {caps:?}");
        }
    }

    #[test]
    fn scene_streams_are_deterministic() {
        for idx in 0..20u64 {
            assert_eq!(scene_for(3, Split::Val, idx), scene_for(3, Split::Val, idx));
        }
    }

    #[test]
    fn train_test_descriptor_sets_disjoint() {
        let train: HashSet<String> = (0..500u64)
            .map(|i| scene_for(0, Split::Train, i).descriptor())
            .collect();
        let test: HashSet<String> = (0..100u64)
            .map(|i| scene_for(0, Split::Test, i).descriptor())
            .collect();
        assert!(train.is_disjoint(&test));
    }

    fn dataset_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            let mut entries: Vec<_> = std::fs::read_dir(&d).unwrap().map(|e| e.unwrap()).collect();
            entries.sort_by_key(|e| e.file_name());
            for e in entries {
                let p = e.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push((
                        p.strip_prefix(dir).unwrap().display().to_string(),
                        std::fs::read(&p).unwrap(),
                    ));
                }
            }
        }
        files.sort();
        files
    }

    #[test]
    fn make_dataset_is_byte_identical_and_counts_match() {
        let header = DatasetHeader {
            seed: 0,
            resolution: 16,
            n_train: 8,
            n_val: 2,
            n_test: 2,
            captions_per_image: 2,
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        make_dataset(d1.path(), &header).unwrap();
        make_dataset(d2.path(), &header).unwrap();
        assert_eq!(dataset_bytes(d1.path()), dataset_bytes(d2.path()));

        let train = Dataset::load(d1.path(), Split::Train).unwrap();
        assert_eq!(train.len(), 8);
        let img = train.image(0).unwrap();
        assert_eq!(img.shape, vec![16, 16, 3]);
        assert!(train.records.iter().all(|r| r.captions.len() >= 2));
    }

    #[test]
    fn truncated_image_file_reports_expected_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.f32");
        std::fs::write(&path, [0u8; 10]).unwrap();
        let err = read_f32_image(&path, 16).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3072"), "{msg}"); // 16*16*3*4
    }
}
