//! Synthetic compositional images: colored motifs on a coarse grid, with
//! groups of items that share an attribute set but place it differently.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{AttributeTarget, IdTarget, LandmarkTarget};
use crate::model::train::TrainSample;
use crate::model::Targets;
use crate::tensor::{read_tensor_file, write_tensor_file, AnyTensor, Tensor};

/// Ground-truth heatmap width in heatmap cells.
pub const HEATMAP_SIGMA: f64 = 1.0;

const MANIFEST_MAGIC: &str = "ahbn-manifest";
const MANIFEST_VERSION: u32 = 1;

const COLORS: [[f64; 3]; 6] =
    [[1.0, 0.15, 0.15], [0.15, 1.0, 0.15], [0.2, 0.3, 1.0], [1.0, 1.0, 0.15], [0.15, 1.0, 1.0], [1.0, 0.15, 1.0]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotifShape {
    Disc,
    Square,
    Ring,
    Cross,
}

impl MotifShape {
    const ALL: [MotifShape; 4] = [MotifShape::Disc, MotifShape::Square, MotifShape::Ring, MotifShape::Cross];

    fn covers(self, dr: f64, dc: f64, radius: f64) -> bool {
        let d2 = dr * dr + dc * dc;
        match self {
            MotifShape::Disc => d2 <= radius * radius,
            MotifShape::Square => dr.abs().max(dc.abs()) <= 0.8 * radius,
            MotifShape::Ring => d2 <= radius * radius && d2 > 0.25 * radius * radius,
            MotifShape::Cross => dr.abs().max(dc.abs()) <= radius && dr.abs().min(dc.abs()) <= 0.25 * radius,
        }
    }
}

/// Visual definition of one attribute. Every attribute belongs to exactly one
/// landmark group; an item shows at most one attribute per group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motif {
    pub group: usize,
    pub shape: MotifShape,
    pub color: [f64; 3],
    pub striped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_items: usize,
    /// Training renders per item; the first is unjittered.
    pub renders_per_item: usize,
    pub queries_per_item: usize,
    pub image_size: usize,
    /// Cells per side of the placement grid.
    pub grid_cells: usize,
    pub num_attributes: usize,
    pub num_landmarks: usize,
    /// Inclusive range of motifs per item.
    pub motifs_per_item: (usize, usize),
    pub motif_radius: f64,
    /// Items per group sharing one attribute set. Members of a group are
    /// cyclic whole-cell shifts of one layout.
    pub confusable_group_size: usize,
    /// Maximum translation in pixels along each axis.
    pub translation_jitter: i64,
    /// Query brightness factors lie in `1 ± [lo, hi]`; gallery renders use 1.
    pub brightness_jitter: (f64, f64),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_items: 50,
            renders_per_item: 8,
            queries_per_item: 2,
            image_size: 64,
            grid_cells: 4,
            num_attributes: 10,
            num_landmarks: 4,
            motifs_per_item: (2, 3),
            motif_radius: 5.0,
            confusable_group_size: 3,
            translation_jitter: 3,
            brightness_jitter: (0.15, 0.35),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("synth spec: {msg}")));
        if self.num_items == 0 || self.renders_per_item == 0 || self.queries_per_item == 0 {
            return bad("item, render and query counts must be positive".into());
        }
        if self.num_landmarks == 0 || self.num_attributes < self.num_landmarks {
            return bad(format!(
                "need at least one attribute per landmark group ({} attributes, {} landmarks)",
                self.num_attributes, self.num_landmarks
            ));
        }
        if self.num_attributes.div_ceil(self.num_landmarks) > COLORS.len() {
            return bad(format!("at most {} attributes per landmark group", COLORS.len()));
        }
        let (lo, hi) = self.motifs_per_item;
        if lo == 0 || lo > hi || hi > self.num_landmarks {
            return bad(format!("motif range {lo}..={hi} must lie in 1..={}", self.num_landmarks));
        }
        if self.grid_cells == 0 || hi > self.grid_cells * self.grid_cells {
            return bad(format!("{} grid cells cannot hold {hi} motifs", self.grid_cells.pow(2)));
        }
        if self.confusable_group_size < 2 {
            return bad("confusable groups need at least two items".into());
        }
        if !(self.motif_radius > 0.0) || self.translation_jitter < 0 {
            return bad("radius must be positive and jitter non-negative".into());
        }
        let (blo, bhi) = self.brightness_jitter;
        if !(blo > 0.0 && blo <= bhi && bhi < 1.0) {
            return bad(format!("brightness jitter ({blo}, {bhi}) must satisfy 0 < lo <= hi < 1"));
        }
        let cell = self.image_size as f64 / self.grid_cells as f64;
        if self.motif_radius + self.translation_jitter as f64 > cell / 2.0 {
            return bad(format!("motif radius plus jitter exceeds half a cell ({} px)", cell / 2.0));
        }
        Ok(())
    }

    /// Attribute `i` is assigned to a landmark group so that group sizes
    /// differ by at most one, larger groups first.
    pub fn palette(&self) -> Vec<Motif> {
        let m = self.num_landmarks;
        let base = self.num_attributes / m;
        let extra = self.num_attributes % m;
        let mut out = Vec::with_capacity(self.num_attributes);
        for g in 0..m {
            let size = base + usize::from(g < extra);
            for _ in 0..size {
                out.push(Motif {
                    group: g,
                    shape: MotifShape::ALL[g % 4],
                    color: COLORS[out.len() % COLORS.len()],
                    striped: (g / 4) % 2 == 1,
                });
            }
        }
        out
    }

    fn cell_center(&self, cell: usize) -> (f64, f64) {
        let size = self.image_size as f64 / self.grid_cells as f64;
        let (r, c) = (cell / self.grid_cells, cell % self.grid_cells);
        ((r as f64 + 0.5) * size, (c as f64 + 0.5) * size)
    }
}

/// One motif instance of an item: attribute index and grid cell (row-major).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Placement {
    pub attribute: usize,
    pub cell: usize,
}

/// The fixed appearance of one item id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemSignature {
    pub placements: Vec<Placement>,
}

impl ItemSignature {
    pub fn attribute_set(&self) -> Vec<usize> {
        self.placements.iter().map(|p| p.attribute).collect()
    }

    pub fn attribute_bits(&self, num_attributes: usize) -> Vec<bool> {
        let mut bits = vec![false; num_attributes];
        for p in &self.placements {
            bits[p.attribute] = true;
        }
        bits
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub row: f64,
    pub col: f64,
    pub visible: bool,
}

/// One rendered image with its labels. Keypoints are in pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub image: Tensor,
    pub item_id: usize,
    pub attributes: Vec<bool>,
    pub landmarks: Vec<Keypoint>,
}

impl SampleRecord {
    /// Landmark coordinates mapped onto a `size × size` heatmap grid.
    pub fn heatmap_coords(&self, size: usize) -> Result<Vec<(f64, f64)>> {
        let (_, h, w) = self.image.dims3()?;
        let map = |p: f64, extent: usize| (p + 0.5) * size as f64 / extent as f64 - 0.5;
        Ok(self.landmarks.iter().map(|k| (map(k.row, h), map(k.col, w))).collect())
    }

    pub fn targets(&self, num_classes: usize, heatmap_size: usize) -> Result<Targets> {
        let visibility = self.landmarks.iter().map(|k| k.visible).collect();
        Ok(Targets {
            id: IdTarget::new(self.item_id, num_classes)?,
            attributes: AttributeTarget::new(self.attributes.clone())?,
            landmarks: LandmarkTarget::from_coords(
                self.heatmap_coords(heatmap_size)?,
                visibility,
                (heatmap_size, heatmap_size),
                HEATMAP_SIGMA,
            )?,
        })
    }

    pub fn to_train_sample(&self, num_classes: usize, heatmap_size: usize) -> Result<TrainSample> {
        Ok(TrainSample { image: self.image.clone(), targets: self.targets(num_classes, heatmap_size)? })
    }
}

/// Records of one split plus the item-level confusable pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub num_attributes: usize,
    pub num_landmarks: usize,
    pub confusable_pairs: Vec<(usize, usize)>,
    pub records: Vec<SampleRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub items: Vec<ItemSignature>,
    /// Item pairs `(a, b)` with `a < b`, sorted.
    pub confusable_pairs: Vec<(usize, usize)>,
    pub train: Vec<SampleRecord>,
    pub query: Vec<SampleRecord>,
    pub gallery: Vec<SampleRecord>,
}

impl Dataset {
    /// Items belonging to at least one confusable pair.
    pub fn confusable_items(&self) -> BTreeSet<usize> {
        self.confusable_pairs.iter().flat_map(|&(a, b)| [a, b]).collect()
    }

    pub fn manifest(&self, split: Split) -> Manifest {
        let records = match split {
            Split::Train => &self.train,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
        };
        Manifest {
            num_attributes: self.spec.num_attributes,
            num_landmarks: self.spec.num_landmarks,
            confusable_pairs: self.confusable_pairs.clone(),
            records: records.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.manifest",
            Split::Query => "query.manifest",
            Split::Gallery => "gallery.manifest",
        }
    }
}

/// All attribute sets with one attribute from each of `lo..=hi` distinct
/// groups, in lexicographic order.
fn attribute_sets(palette: &[Motif], groups: usize, lo: usize, hi: usize) -> Vec<Vec<usize>> {
    let members: Vec<Vec<usize>> =
        (0..groups).map(|g| (0..palette.len()).filter(|&a| palette[a].group == g).collect()).collect();
    let mut out = Vec::new();
    fn extend(g: usize, cur: &mut Vec<usize>, members: &[Vec<usize>], lo: usize, hi: usize, out: &mut Vec<Vec<usize>>) {
        if g == members.len() {
            if (lo..=hi).contains(&cur.len()) {
                out.push(cur.clone());
            }
            return;
        }
        extend(g + 1, cur, members, lo, hi, out);
        if cur.len() < hi {
            for &a in &members[g] {
                cur.push(a);
                extend(g + 1, cur, members, lo, hi, out);
                cur.pop();
            }
        }
    }
    extend(0, &mut Vec::new(), &members, lo, hi, &mut out);
    out.sort();
    out
}

fn random_placement(set: &[usize], cells: usize, rng: &mut ChaCha8Rng) -> ItemSignature {
    let chosen: Vec<usize> = rand::seq::index::sample(rng, cells, set.len()).into_vec();
    let placements = set.iter().zip(chosen).map(|(&attribute, cell)| Placement { attribute, cell }).collect();
    ItemSignature { placements }
}

/// Moves every motif of `sig` by `(dr, dc)` cells on the torus.
fn cyclic_shift(sig: &ItemSignature, dr: usize, dc: usize, grid: usize) -> ItemSignature {
    let placements = sig
        .placements
        .iter()
        .map(|p| Placement {
            attribute: p.attribute,
            cell: ((p.cell / grid + dr) % grid) * grid + (p.cell % grid + dc) % grid,
        })
        .collect();
    ItemSignature { placements }
}

/// Sizes of the confusable groups: enough pairs to cover `⌈n/4⌉` when the
/// item count allows it.
fn confusable_group_sizes(n: usize, k: usize) -> Vec<usize> {
    let needed = n.div_ceil(4);
    let (mut pairs, mut remaining, mut sizes) = (0, n, Vec::new());
    while pairs < needed {
        let size = k.min(remaining);
        if size < 2 {
            break;
        }
        sizes.push(size);
        pairs += size * (size - 1) / 2;
        remaining -= size;
    }
    sizes
}

fn draw_signatures(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<ItemSignature>, Vec<(usize, usize)>)> {
    let palette = spec.palette();
    let (lo, hi) = spec.motifs_per_item;
    let mut sets = attribute_sets(&palette, spec.num_landmarks, lo, hi);
    let group_sizes = confusable_group_sizes(spec.num_items, spec.confusable_group_size);
    let grouped: usize = group_sizes.iter().sum();
    let distinct_sets = group_sizes.len() + spec.num_items - grouped;
    if distinct_sets > sets.len() {
        return Err(Error::Config(format!(
            "synth spec needs {distinct_sets} distinct attribute sets, only {} exist",
            sets.len()
        )));
    }
    let cells = spec.grid_cells * spec.grid_cells;
    sets.shuffle(rng);
    let mut sets = sets.into_iter();
    let mut items: Vec<(ItemSignature, Option<usize>)> = Vec::with_capacity(spec.num_items);
    for (gi, &size) in group_sizes.iter().enumerate() {
        let set = sets.next().expect("counted above");
        let base = random_placement(&set, cells, rng);
        let mut shifts: Vec<usize> = (1..cells).collect();
        shifts.shuffle(rng);
        let mut members = vec![base.clone()];
        for s in shifts {
            if members.len() == size {
                break;
            }
            let moved = cyclic_shift(&base, s / spec.grid_cells, s % spec.grid_cells, spec.grid_cells);
            if !members.contains(&moved) {
                members.push(moved);
            }
        }
        if members.len() < size {
            return Err(Error::Config("grid too small for distinct confusable placements".into()));
        }
        items.extend(members.into_iter().map(|s| (s, Some(gi))));
    }
    while items.len() < spec.num_items {
        let set = sets.next().expect("counted above");
        items.push((random_placement(&set, cells, rng), None));
    }
    items.shuffle(rng);

    let mut pairs = Vec::new();
    for a in 0..items.len() {
        for b in a + 1..items.len() {
            if items[a].1.is_some() && items[a].1 == items[b].1 {
                pairs.push((a, b));
            }
        }
    }
    Ok((items.into_iter().map(|(s, _)| s).collect(), pairs))
}

/// Renders `sig` shifted by `shift` pixels with motif colors scaled by
/// `brightness`, on a black background.
pub fn render(spec: &SynthSpec, sig: &ItemSignature, shift: (i64, i64), brightness: f64) -> Result<Tensor> {
    let s = spec.image_size;
    let palette = spec.palette();
    let mut data = vec![0.0; 3 * s * s];
    for p in &sig.placements {
        let motif = &palette[p.attribute];
        let (cr, cc) = spec.cell_center(p.cell);
        let (cr, cc) = (cr + shift.0 as f64, cc + shift.1 as f64);
        let reach = spec.motif_radius.ceil() as i64 + 1;
        for r in (cr as i64 - reach).max(0)..(cr as i64 + reach + 1).min(s as i64) {
            if motif.striped && r % 2 == 1 {
                continue;
            }
            for c in (cc as i64 - reach).max(0)..(cc as i64 + reach + 1).min(s as i64) {
                // Pixel (r, c) covers [r, r+1); its center is at r + 0.5.
                if motif.shape.covers(r as f64 + 0.5 - cr, c as f64 + 0.5 - cc, spec.motif_radius) {
                    for (ch, &v) in motif.color.iter().enumerate() {
                        data[(ch * s + r as usize) * s + c as usize] = v * brightness;
                    }
                }
            }
        }
    }
    Tensor::new(vec![3, s, s], data)
}

fn keypoints(spec: &SynthSpec, sig: &ItemSignature, shift: (i64, i64)) -> Vec<Keypoint> {
    let palette = spec.palette();
    let mut out = vec![Keypoint { row: 0.0, col: 0.0, visible: false }; spec.num_landmarks];
    for p in &sig.placements {
        let (r, c) = spec.cell_center(p.cell);
        out[palette[p.attribute].group] = Keypoint { row: r + shift.0 as f64, col: c + shift.1 as f64, visible: true };
    }
    out
}

fn make_record(
    spec: &SynthSpec,
    items: &[ItemSignature],
    id: usize,
    shift: (i64, i64),
    brightness: f64,
) -> Result<SampleRecord> {
    let sig = &items[id];
    Ok(SampleRecord {
        image: render(spec, sig, shift, brightness)?,
        item_id: id,
        attributes: sig.attribute_bits(spec.num_attributes),
        landmarks: keypoints(spec, sig, shift),
    })
}

pub fn generate_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (items, confusable_pairs) = draw_signatures(spec, &mut rng)?;
    let j = spec.translation_jitter;
    let (blo, bhi) = spec.brightness_jitter;

    let mut train = Vec::with_capacity(items.len() * spec.renders_per_item);
    let mut query = Vec::with_capacity(items.len() * spec.queries_per_item);
    let mut gallery = Vec::with_capacity(items.len());
    for id in 0..items.len() {
        gallery.push(make_record(spec, &items, id, (0, 0), 1.0)?);
        train.push(make_record(spec, &items, id, (0, 0), 1.0)?);
        for _ in 1..spec.renders_per_item {
            let shift = (rng.gen_range(-j..=j), rng.gen_range(-j..=j));
            let brightness = rng.gen_range(1.0 - bhi..=1.0 + bhi);
            train.push(make_record(spec, &items, id, shift, brightness)?);
        }
        for _ in 0..spec.queries_per_item {
            let shift = (rng.gen_range(-j..=j), rng.gen_range(-j..=j));
            let magnitude = rng.gen_range(blo..=bhi);
            let brightness = if rng.gen_bool(0.5) { 1.0 + magnitude } else { 1.0 - magnitude };
            query.push(make_record(spec, &items, id, shift, brightness)?);
        }
    }
    Ok(Dataset { spec: spec.clone(), items, confusable_pairs, train, query, gallery })
}

fn image_dir_name(manifest: &Path) -> String {
    let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("manifest");
    format!("{stem}_images")
}

/// Writes the manifest text to `path` and one tensor file per record into a
/// sibling `<stem>_images` directory.
pub fn write_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let images = image_dir_name(path);
    if !manifest.records.is_empty() {
        fs::create_dir_all(dir.join(&images)).map_err(|e| Error::io(dir.join(&images), e))?;
    }
    let mut text = format!(
        "{MANIFEST_MAGIC} {MANIFEST_VERSION} attributes={} landmarks={}\n",
        manifest.num_attributes, manifest.num_landmarks
    );
    for (a, b) in &manifest.confusable_pairs {
        writeln!(text, "pair {a} {b}").expect("string write");
    }
    for (i, rec) in manifest.records.iter().enumerate() {
        if rec.attributes.len() != manifest.num_attributes || rec.landmarks.len() != manifest.num_landmarks {
            return Err(Error::shape(format!("record {i} does not match the manifest header")));
        }
        let rel = format!("{images}/{i:05}.tnsr");
        write_tensor_file(dir.join(&rel), &rec.image)?;
        let bits: String = rec.attributes.iter().map(|&b| if b { '1' } else { '0' }).collect();
        write!(text, "{rel} {} {bits}", rec.item_id).expect("string write");
        for k in &rec.landmarks {
            write!(text, " {},{},{}", k.row, k.col, u8::from(k.visible)).expect("string write");
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a manifest and loads the tensors it references. Relative tensor
/// paths resolve against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };

    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (num_attributes, num_landmarks) = match fields[..] {
        [magic, version, attrs, lms] if magic == MANIFEST_MAGIC => {
            if version != MANIFEST_VERSION.to_string() {
                return Err(err(1, format!("unsupported version {version}")));
            }
            let count = |field: &str, key: &str| -> Result<usize> {
                field
                    .strip_prefix(key)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| err(1, format!("expected {key}<count>, got {field:?}")))
            };
            (count(attrs, "attributes=")?, count(lms, "landmarks=")?)
        }
        _ => return Err(err(1, format!("expected '{MANIFEST_MAGIC} {MANIFEST_VERSION} attributes=N landmarks=M'"))),
    };

    let mut confusable_pairs = Vec::new();
    let mut records = Vec::new();
    for (no, line) in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() || fields[0].starts_with('#') {
            continue;
        }
        if fields[0] == "pair" {
            let ids: Vec<usize> = fields[1..]
                .iter()
                .map(|f| f.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(no, format!("bad pair id: {e}")))?;
            match ids[..] {
                [a, b] => confusable_pairs.push((a, b)),
                _ => return Err(err(no, "pair lines need exactly two item ids".into())),
            }
            continue;
        }
        if fields.len() != 3 + num_landmarks {
            return Err(err(no, format!("expected {} fields, got {}", 3 + num_landmarks, fields.len())));
        }
        let item_id: usize = fields[1].parse().map_err(|e| err(no, format!("bad item id {:?}: {e}", fields[1])))?;
        if fields[2].len() != num_attributes {
            return Err(err(no, format!("expected {num_attributes} attribute bits, got {:?}", fields[2])));
        }
        let attributes = fields[2]
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(err(no, format!("attribute bits must be 0/1, got {c:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let landmarks = fields[3..]
            .iter()
            .map(|f| {
                let parts: Vec<&str> = f.split(',').collect();
                let coord = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
                match parts[..] {
                    [r, c, v] => match (coord(r), coord(c), v) {
                        (Some(row), Some(col), "0" | "1") => Ok(Keypoint { row, col, visible: v == "1" }),
                        _ => Err(err(no, format!("bad landmark triple {f:?}"))),
                    },
                    _ => Err(err(no, format!("landmark needs row,col,vis, got {f:?}"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let tensor_path: PathBuf = dir.join(fields[0]);
        let image = match read_tensor_file(&tensor_path)? {
            AnyTensor::F64(t) => t,
            AnyTensor::F32(t) => t.cast(),
        };
        image.dims3().map_err(|e| err(no, e.to_string()))?;
        records.push(SampleRecord { image, item_id, attributes, landmarks });
    }
    Ok(Manifest { num_attributes, num_landmarks, confusable_pairs, records })
}

/// Writes the three split manifests into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in Split::ALL {
        write_manifest(dir.join(split.file_name()), &dataset.manifest(split))?;
    }
    Ok(())
}
