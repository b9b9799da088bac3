//! Scene-with-variants datasets: the on-disk layout, the random pair
//! sampler that picks an input and a *different* target variant of the same
//! scene, and the policy-driven triplet sampler.
//!
//! A scene is one fixed arrangement of content captured under `n` different
//! nuisance conditions; every sampler treats those `n` images as
//! interchangeable views of the same thing.

use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

/// Which half of a dataset a manifest covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?}, expected train or test"
            ))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// Ground-truth annotation of one scene.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Label {
    /// Per-seat occupancy classes, one entry per seat position.
    Seats(Vec<u8>),
    /// Single categorical id (head pose, camera location, ...).
    Category(u32),
}

impl Label {
    /// True when every seat is empty. Meaningless for category labels.
    pub fn is_all_empty(&self) -> bool {
        match self {
            Label::Seats(seats) => seats.iter().all(|&s| s == 0),
            Label::Category(_) => false,
        }
    }

    /// Number of seat positions on which two seat labels differ.
    pub fn seat_hamming(&self, other: &Label) -> Option<usize> {
        match (self, other) {
            (Label::Seats(a), Label::Seats(b)) if a.len() == b.len() => {
                Some(a.iter().zip(b.iter()).filter(|(x, y)| x != y).count())
            }
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LabelJson {
    Seats { seats: Vec<u8> },
    Category { category: u32 },
}

impl From<&Label> for LabelJson {
    fn from(label: &Label) -> Self {
        match label {
            Label::Seats(seats) => LabelJson::Seats { seats: seats.clone() },
            Label::Category(id) => LabelJson::Category { category: *id },
        }
    }
}

impl From<LabelJson> for Label {
    fn from(json: LabelJson) -> Self {
        match json {
            LabelJson::Seats { seats } => Label::Seats(seats),
            LabelJson::Category { category } => Label::Category(category),
        }
    }
}

/// Writes `label.json` for a scene directory.
pub fn write_label(path: &Path, label: &Label) -> Result<()> {
    let json = serde_json::to_string(&LabelJson::from(label))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// One scene: its id, label, and the paths of its variant images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneRecord {
    pub scene_id: u64,
    pub label: Label,
    pub variants: Vec<PathBuf>,
}

impl SceneRecord {
    pub fn variant_count(&self) -> usize {
        self.variants.len()
    }
}

/// Dataset-level constants stored in `meta.json` at the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seat_count: usize,
    pub class_names: Vec<String>,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub generator_seed: u64,
}

impl DatasetMeta {
    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join("meta.json");
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join("meta.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A validated view of one split of a dataset on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub scenes: Vec<SceneRecord>,
    pub seat_count: usize,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn scene_by_id(&self, scene_id: u64) -> Option<&SceneRecord> {
        self.scenes.iter().find(|s| s.scene_id == scene_id)
    }

    /// Decodes one variant image.
    pub fn load_variant(&self, scene: &SceneRecord, variant: usize) -> Result<ImageTensor> {
        let path = scene.variants.get(variant).ok_or_else(|| {
            Error::Contract(format!(
                "scene {} has {} variants, index {variant} out of range",
                scene.scene_id,
                scene.variant_count()
            ))
        })?;
        ImageTensor::read_png(path)
    }

    /// Decodes every image into memory, scene by scene, in manifest order.
    pub fn load_all(&self) -> Result<LoadedDataset> {
        let mut images = Vec::with_capacity(self.scenes.len());
        let mut shape = None;
        for scene in &self.scenes {
            let mut variants = Vec::with_capacity(scene.variant_count());
            for v in 0..scene.variant_count() {
                let img = self.load_variant(scene, v)?;
                match shape {
                    None => shape = Some(img.shape()),
                    Some(s) if s != img.shape() => {
                        return Err(Error::Data(format!(
                            "scene {} variant {v} has shape {:?}, expected {s:?}",
                            scene.scene_id,
                            img.shape()
                        )))
                    }
                    _ => {}
                }
                variants.push(img);
            }
            images.push(variants);
        }
        Ok(LoadedDataset {
            manifest: self.clone(),
            images,
        })
    }
}

/// A manifest plus all of its images decoded into memory.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    /// `images[i][j]` is variant `j` of `manifest.scenes[i]`.
    pub images: Vec<Vec<ImageTensor>>,
}

impl LoadedDataset {
    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.images[0][0].shape()
    }
}

/// Scans `<root>/<split>/scene_<k>/` directories into a validated manifest.
///
/// Scene directories are ordered by their numeric id, so the result is
/// deterministic for identical directory contents.
pub fn load_manifest(root: &Path, split: Split) -> Result<DatasetManifest> {
    let meta = DatasetMeta::read(root)?;
    let split_dir = root.join(split.dir_name());
    let entries = std::fs::read_dir(&split_dir).map_err(|e| Error::io(&split_dir, e))?;

    let mut scene_dirs: Vec<(u64, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&split_dir, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(id_str) = name.strip_prefix("scene_") else {
            continue;
        };
        let id: u64 = id_str.parse().map_err(|_| {
            Error::Data(format!(
                "directory {name:?} in {} does not follow the scene_<k> naming scheme",
                split_dir.display()
            ))
        })?;
        scene_dirs.push((id, path));
    }
    scene_dirs.sort_by_key(|(id, _)| *id);
    for pair in scene_dirs.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::Data(format!("duplicate scene id {}", pair[0].0)));
        }
    }

    let mut scenes = Vec::with_capacity(scene_dirs.len());
    for (scene_id, dir) in scene_dirs {
        let label_path = dir.join("label.json");
        let text = std::fs::read_to_string(&label_path).map_err(|e| {
            Error::Data(format!(
                "scene {scene_id}: cannot read {}: {e}",
                label_path.display()
            ))
        })?;
        let label: Label = serde_json::from_str::<LabelJson>(&text)
            .map_err(|e| Error::Data(format!("scene {scene_id}: invalid label.json: {e}")))?
            .into();
        if let Label::Seats(seats) = &label {
            if seats.len() != meta.seat_count {
                return Err(Error::Data(format!(
                    "scene {scene_id}: label has {} seats, meta.json declares {}",
                    seats.len(),
                    meta.seat_count
                )));
            }
        }

        let mut variants: Vec<(u64, PathBuf)> = Vec::new();
        let dir_entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in dir_entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(stem) = name.strip_prefix("variant_").and_then(|s| s.strip_suffix(".png"))
            else {
                continue;
            };
            let j: u64 = stem.parse().map_err(|_| {
                Error::Data(format!(
                    "scene {scene_id}: file {name:?} does not follow variant_<j>.png"
                ))
            })?;
            variants.push((j, entry.path()));
        }
        variants.sort_by_key(|(j, _)| *j);
        if variants.len() < 2 {
            return Err(Error::Data(format!(
                "scene {scene_id} has {} variant image(s); at least 2 are required",
                variants.len()
            )));
        }
        scenes.push(SceneRecord {
            scene_id,
            label,
            variants: variants.into_iter().map(|(_, p)| p).collect(),
        });
    }

    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split,
        scenes,
        seat_count: meta.seat_count,
        class_names: meta.class_names,
    })
}

/// One input/target draw for a scene: reconstruct variant `target_variant`
/// from variant `input_variant`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSample {
    pub scene_id: u64,
    pub input_variant: usize,
    pub target_variant: usize,
}

/// Draws an ordered pair of distinct variant indices, uniform over the
/// `n * (n - 1)` possibilities.
pub fn sample_pair<R: Rng>(scene: &SceneRecord, rng: &mut R) -> Result<PairSample> {
    let n = scene.variant_count();
    if n < 2 {
        return Err(Error::Contract(format!(
            "scene {} has {n} variant(s); pair sampling needs at least 2",
            scene.scene_id
        )));
    }
    let a = rng.gen_range(0..n);
    let mut b = rng.gen_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    Ok(PairSample {
        scene_id: scene.scene_id,
        input_variant: a,
        target_variant: b,
    })
}

/// Anchor/positive/negative scenes, each with its own independent pair draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletSample {
    pub anchor: PairSample,
    pub positive: PairSample,
    pub negative: PairSample,
}

/// How anchor, positive and negative labels must relate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletPolicy {
    /// Positive: identical seat occupancy. Negative: exactly one seat
    /// differs, and never the all-empty arrangement. All-empty scenes are
    /// also excluded as anchors: an image of three empty seats carries no
    /// content to anchor on.
    Seat,
    /// Positive: same pose id, negative: any other pose id.
    Pose,
    /// Positive: same location id, negative: any other location id.
    Location,
}

impl std::str::FromStr for TripletPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seat" => Ok(TripletPolicy::Seat),
            "pose" => Ok(TripletPolicy::Pose),
            "location" => Ok(TripletPolicy::Location),
            other => Err(Error::Config(format!(
                "unknown triplet policy {other:?}, expected seat, pose or location"
            ))),
        }
    }
}

impl TripletPolicy {
    /// Whether a scene with this label may serve as a triplet anchor.
    pub fn eligible_anchor(&self, label: &Label) -> bool {
        match self {
            TripletPolicy::Seat => matches!(label, Label::Seats(_)) && !label.is_all_empty(),
            TripletPolicy::Pose | TripletPolicy::Location => matches!(label, Label::Category(_)),
        }
    }

    pub fn is_positive(&self, anchor: &Label, candidate: &Label) -> bool {
        match self {
            TripletPolicy::Seat => anchor == candidate && matches!(anchor, Label::Seats(_)),
            TripletPolicy::Pose | TripletPolicy::Location => {
                matches!((anchor, candidate), (Label::Category(a), Label::Category(c)) if a == c)
            }
        }
    }

    pub fn is_negative(&self, anchor: &Label, candidate: &Label) -> bool {
        match self {
            TripletPolicy::Seat => {
                anchor.seat_hamming(candidate) == Some(1) && !candidate.is_all_empty()
            }
            TripletPolicy::Pose | TripletPolicy::Location => {
                matches!((anchor, candidate), (Label::Category(a), Label::Category(c)) if a != c)
            }
        }
    }

    fn label_kind_matches(&self, label: &Label) -> bool {
        match self {
            TripletPolicy::Seat => matches!(label, Label::Seats(_)),
            TripletPolicy::Pose | TripletPolicy::Location => matches!(label, Label::Category(_)),
        }
    }
}

/// Selects the positive and negative scenes for a triplet without drawing
/// any variant pairs. Returns `(anchor, positive, negative)` scene ids.
pub fn sample_triplet_scenes<R: Rng>(
    manifest: &DatasetManifest,
    anchor_scene_id: u64,
    policy: TripletPolicy,
    rng: &mut R,
) -> Result<(u64, u64, u64)> {
    let anchor = manifest.scene_by_id(anchor_scene_id).ok_or_else(|| {
        Error::Contract(format!("anchor scene {anchor_scene_id} is not in the manifest"))
    })?;
    if !policy.label_kind_matches(&anchor.label) {
        return Err(Error::Contract(format!(
            "policy {policy:?} does not apply to label {:?}",
            anchor.label
        )));
    }
    if !policy.eligible_anchor(&anchor.label) {
        return Err(Error::Sampling(format!(
            "scene {anchor_scene_id} is excluded as a triplet anchor (label {:?})",
            anchor.label
        )));
    }

    let positives: Vec<&SceneRecord> = manifest
        .scenes
        .iter()
        .filter(|s| s.scene_id != anchor_scene_id && policy.is_positive(&anchor.label, &s.label))
        .collect();
    if positives.is_empty() {
        return Err(Error::Sampling(format!(
            "no eligible positive scene for anchor {anchor_scene_id} (label {:?})",
            anchor.label
        )));
    }
    let negatives: Vec<&SceneRecord> = manifest
        .scenes
        .iter()
        .filter(|s| s.scene_id != anchor_scene_id && policy.is_negative(&anchor.label, &s.label))
        .collect();
    if negatives.is_empty() {
        return Err(Error::Sampling(format!(
            "no eligible negative scene for anchor {anchor_scene_id} (label {:?})",
            anchor.label
        )));
    }

    let positive = positives[rng.gen_range(0..positives.len())];
    let negative = negatives[rng.gen_range(0..negatives.len())];
    Ok((anchor_scene_id, positive.scene_id, negative.scene_id))
}

/// Draws a triplet around the given anchor scene: a positive scene with a
/// matching label but different identity, a negative scene per the policy,
/// and one independent variant pair per member.
pub fn sample_triplet<R: Rng>(
    manifest: &DatasetManifest,
    anchor_scene_id: u64,
    policy: TripletPolicy,
    rng: &mut R,
) -> Result<TripletSample> {
    let (a, p, n) = sample_triplet_scenes(manifest, anchor_scene_id, policy, rng)?;
    let scene = |id| manifest.scene_by_id(id).expect("id came from this manifest");
    Ok(TripletSample {
        anchor: sample_pair(scene(a), rng)?,
        positive: sample_pair(scene(p), rng)?,
        negative: sample_pair(scene(n), rng)?,
    })
}

/// Scene ids that may anchor triplets under a policy, in manifest order.
pub fn eligible_anchor_ids(manifest: &DatasetManifest, policy: TripletPolicy) -> Vec<u64> {
    let mut counts: HashMap<&Label, usize> = HashMap::new();
    for scene in &manifest.scenes {
        *counts.entry(&scene.label).or_insert(0) += 1;
    }
    manifest
        .scenes
        .iter()
        .filter(|s| policy.eligible_anchor(&s.label))
        .filter(|s| counts.get(&s.label).copied().unwrap_or(0) >= 2)
        .filter(|s| {
            manifest
                .scenes
                .iter()
                .any(|c| c.scene_id != s.scene_id && policy.is_negative(&s.label, &c.label))
        })
        .map(|s| s.scene_id)
        .collect()
}

/// One photometric perturbation, with its parameter range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentOp {
    /// Multiplies every pixel by a factor drawn from `[lo, hi]`.
    Gain { lo: f32, hi: f32 },
    /// Adds an offset drawn from `[lo, hi]`.
    Bias { lo: f32, hi: f32 },
    /// Adds a linear ramp of random direction; strength drawn from
    /// `[0, max_strength]`.
    Gradient { max_strength: f32 },
    /// Adds zero-mean Gaussian noise with the given standard deviation.
    Noise { sigma: f32 },
    /// Pixel shift. Not photometric; always rejected.
    Translate { max_px: u32 },
    /// Mirror flip. Not photometric; always rejected.
    Flip,
}

impl AugmentOp {
    fn is_photometric(&self) -> bool {
        !matches!(self, AugmentOp::Translate { .. } | AugmentOp::Flip)
    }
}

/// An ordered list of perturbations applied per draw.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub ops: Vec<AugmentOp>,
}

impl AugmentSpec {
    /// Rejects geometric ops and malformed parameter ranges. Geometric ops
    /// are a configuration error because input and target must stay
    /// pixel-aligned for a content-identity loss to make sense.
    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.ops.iter().find(|op| !op.is_photometric()) {
            return Err(Error::Config(format!(
                "augmentation op {bad:?} is geometric; only photometric ops keep the pair aligned"
            )));
        }
        for op in &self.ops {
            match op {
                AugmentOp::Gain { lo, hi } | AugmentOp::Bias { lo, hi } if lo > hi => {
                    return Err(Error::Config(format!("augmentation range inverted: {op:?}")));
                }
                AugmentOp::Gradient { max_strength } if *max_strength < 0.0 => {
                    return Err(Error::Config(format!("negative gradient strength: {op:?}")));
                }
                AugmentOp::Noise { sigma } if !(*sigma >= 0.0) => {
                    return Err(Error::Config(format!("invalid noise sigma: {op:?}")));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// What the two returned images are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// Two independent random augmentations of the same image.
    Both,
    /// The clean image first, an augmented copy second; training against
    /// this pair asks the model to undo the perturbation.
    ReverseDenoise,
}

impl std::str::FromStr for AugmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(AugmentMode::Both),
            "reverse_denoise" => Ok(AugmentMode::ReverseDenoise),
            other => Err(Error::Config(format!(
                "unknown augment mode {other:?}, expected both or reverse_denoise"
            ))),
        }
    }
}

fn apply_augment<R: Rng>(image: &ImageTensor, spec: &AugmentSpec, rng: &mut R) -> ImageTensor {
    let (h, w, _) = image.shape();
    let mut data = image.data().clone();
    for op in &spec.ops {
        match op {
            AugmentOp::Gain { lo, hi } => {
                let g = rng.gen_range(*lo..=*hi);
                data.mapv_inplace(|v| v * g);
            }
            AugmentOp::Bias { lo, hi } => {
                let b = rng.gen_range(*lo..=*hi);
                data.mapv_inplace(|v| v + b);
            }
            AugmentOp::Gradient { max_strength } => {
                let theta = rng.gen_range(0.0f32..std::f32::consts::TAU);
                let strength = rng.gen_range(0.0..=*max_strength);
                let (cos, sin) = (theta.cos(), theta.sin());
                for ((y, x, _), v) in data.indexed_iter_mut() {
                    let u = x as f32 / w as f32 - 0.5;
                    let t = y as f32 / h as f32 - 0.5;
                    *v += strength * (u * cos + t * sin);
                }
            }
            AugmentOp::Noise { sigma } => {
                use rand_distr::Distribution;
                let dist = rand_distr::Normal::new(0.0f32, *sigma).expect("sigma validated");
                data.mapv_inplace(|v| v + dist.sample(rng));
            }
            AugmentOp::Translate { .. } | AugmentOp::Flip => {
                unreachable!("geometric ops are rejected before application")
            }
        }
    }
    ImageTensor::from_clamped(data)
}

/// Produces an input/target image pair from one source image by photometric
/// perturbation, for training data without true multi-variant scenes.
pub fn augment_pair<R: Rng>(
    image: &ImageTensor,
    spec: &AugmentSpec,
    mode: AugmentMode,
    rng: &mut R,
) -> Result<(ImageTensor, ImageTensor)> {
    spec.validate()?;
    Ok(match mode {
        AugmentMode::Both => {
            let first = apply_augment(image, spec, rng);
            let second = apply_augment(image, spec, rng);
            (first, second)
        }
        AugmentMode::ReverseDenoise => {
            let second = apply_augment(image, spec, rng);
            (image.clone(), second)
        }
    })
}
