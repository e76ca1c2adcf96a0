//! Grasp-attempt datasets: generation, on-disk format and stacked training batches.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::graspspace::{Grasp, GraspSpec};
use crate::objectgen::{export_mesh, generate_indexed, import_mesh, CompositeObject, GenError, GenParams, TargetSize};
use crate::rng::{derive_seed, stream_rng};
use crate::simworld::{apply_depth_noise, evaluate_grasp, quick_reject, DepthImage, NoiseParams, Scene, SimConfig};

pub const FORMAT_VERSION: u32 = 1;
const RECORD_MAGIC: &[u8; 4] = b"GFSR";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("checksum mismatch in {path}")]
    Checksum { path: PathBuf },
    #[error("{path}: format version {found}, expected {expected}")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: {msg}")]
    CountMismatch { path: PathBuf, msg: String },
    #[error("no scenes with successful grasps to batch")]
    EmptyBatch,
    #[error("batch of {needed} scenes requested but only {available} have successes")]
    NotEnoughScenes { needed: usize, available: usize },
    #[error(transparent)]
    Generation(#[from] GenError),
    #[error("invalid dataset request: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> DatasetError {
    DatasetError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attempt {
    pub grasp: Grasp,
    pub label: bool,
    /// Quick-rejected attempts carry no hand image.
    pub rejected: bool,
    pub hand: Option<DepthImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub scene_id: String,
    pub object_id: String,
    pub yaw: f64,
    pub observations: Vec<DepthImage>,
    pub attempts: Vec<Attempt>,
}

impl SceneRecord {
    pub fn successes(&self) -> impl Iterator<Item = &Grasp> + '_ {
        self.attempts.iter().filter(|a| a.label).map(|a| &a.grasp)
    }

    pub fn success_count(&self) -> usize {
        self.attempts.iter().filter(|a| a.label).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub grasp: GraspSpec,
    pub gen: GenParams,
    pub object_count: usize,
    pub attempts_per_object: usize,
    pub seed: u64,
    pub format_version: u32,
    /// Additional settings recorded for provenance (camera, noise, oracle).
    pub settings: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub objects: Vec<CompositeObject>,
    pub records: Vec<SceneRecord>,
}

/// Objects whose id hashes to 0 mod 10 are held out of training.
pub fn is_held_out(object_id: &str) -> bool {
    derive_seed(0, object_id) % 10 == 0
}

/// First `count` generator indices, starting at 0, on the requested side of the split.
pub fn split_indices(seed: u64, count: usize, held_out: bool) -> Vec<u64> {
    (0u64..)
        .filter(|&i| is_held_out(&crate::objectgen::object_id(seed, i)) == held_out)
        .take(count)
        .collect()
}

pub fn generate_objects(seed: u64, indices: &[u64], params: &GenParams) -> Result<Vec<CompositeObject>, DatasetError> {
    params.validate()?;
    let objects: Result<Vec<_>, GenError> = indices
        .par_iter()
        .map(|&i| generate_indexed(seed, i, params))
        .collect();
    Ok(objects?)
}

/// Places each object at a random yaw, renders a noised observation, and labels
/// `attempts_per_object` uniformly sampled grasps with the oracle.
pub fn generate_scene_records(
    objects: &[CompositeObject],
    attempts_per_object: usize,
    sim: &SimConfig,
    seed: u64,
) -> Result<Vec<SceneRecord>, DatasetError> {
    if objects.is_empty() || attempts_per_object == 0 {
        return Err(DatasetError::Invalid(
            "need at least one object and one attempt per object".into(),
        ));
    }
    sim.noise.validate().map_err(DatasetError::Invalid)?;
    let base = derive_seed(seed, "scene-records");
    Ok(objects
        .par_iter()
        .enumerate()
        .map(|(k, obj)| {
            let mut rng = stream_rng(base, k as u64);
            let yaw = rng.random_range(0.0..2.0 * PI);
            let scene = Scene::place(obj, yaw);
            let observation = apply_depth_noise(&sim.render_scene(&scene), &sim.noise, &mut rng);
            let attempts = (0..attempts_per_object)
                .map(|_| {
                    let grasp = sim.grasp.sample_uniform(&mut rng);
                    label_attempt(&scene, grasp, sim)
                })
                .collect();
            SceneRecord {
                scene_id: format!("{}-s0", obj.id),
                object_id: obj.id.clone(),
                yaw,
                observations: vec![observation],
                attempts,
            }
        })
        .collect())
}

pub fn label_attempt(scene: &Scene, grasp: Grasp, sim: &SimConfig) -> Attempt {
    if quick_reject(scene, &grasp, sim) {
        return Attempt {
            grasp,
            label: false,
            rejected: true,
            hand: None,
        };
    }
    let label = evaluate_grasp(scene, &grasp, sim).success;
    let hand = Some(sim.render_hand(scene, &grasp));
    Attempt {
        grasp,
        label,
        rejected: false,
        hand,
    }
}

/// Generates `count` objects on the requested side of the split and labels them.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    name: &str,
    seed: u64,
    count: usize,
    held_out: bool,
    attempts_per_object: usize,
    gen: &GenParams,
    sim: &SimConfig,
) -> Result<Dataset, DatasetError> {
    let indices = split_indices(seed, count, held_out);
    let objects = generate_objects(seed, &indices, gen)?;
    let records = generate_scene_records(&objects, attempts_per_object, sim, seed)?;
    Ok(Dataset {
        manifest: DatasetManifest {
            name: name.to_string(),
            grasp: sim.grasp,
            gen: gen.clone(),
            object_count: objects.len(),
            attempts_per_object,
            seed,
            format_version: FORMAT_VERSION,
            settings: sim_settings(sim),
        },
        objects,
        records,
    })
}

pub fn sim_settings(sim: &SimConfig) -> BTreeMap<String, String> {
    let o = &sim.oracle;
    let g = &o.gripper;
    let n = &sim.noise;
    [
        ("scene_camera.resolution", sim.scene_resolution.to_string()),
        ("scene_camera.extent", format!("{:?}", sim.scene_extent)),
        ("scene_camera.height", format!("{:?}", sim.scene_camera_height)),
        ("hand_camera.resolution", sim.hand_resolution.to_string()),
        ("hand_camera.extent", format!("{:?}", sim.hand_extent)),
        ("hand_camera.standoff", format!("{:?}", sim.hand_standoff)),
        ("noise.enabled", n.enabled.to_string()),
        ("noise.gamma_shape", format!("{:?}", n.gamma_shape)),
        ("noise.gamma_scale", format!("{:?}", n.gamma_scale)),
        ("noise.gaussian_sigma", format!("{:?}", n.gaussian_sigma)),
        ("oracle.antipodal_cone_deg", format!("{:?}", o.antipodal_cone_deg)),
        ("oracle.stability_factor", format!("{:?}", o.stability_factor)),
        ("oracle.contact_tolerance", format!("{:?}", o.contact_tolerance)),
        ("oracle.pad_samples", o.pad_samples.to_string()),
        ("gripper.max_opening", format!("{:?}", g.max_opening)),
        ("gripper.finger_width", format!("{:?}", g.finger_width)),
        ("gripper.finger_thickness", format!("{:?}", g.finger_thickness)),
        ("gripper.pad_height", format!("{:?}", g.pad_height)),
        ("gripper.finger_length", format!("{:?}", g.finger_length)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Scenes of a batch with their successful grasps stacked into `b × m × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedBatch<'a> {
    pub observations: Vec<&'a [DepthImage]>,
    /// Row-major `b × m × n` bucket indices; padded rows hold 0.
    pub grasps: Vec<u8>,
    /// Row-major `b × m` indicator.
    pub mask: Vec<u8>,
    pub counts: Vec<usize>,
    pub m: usize,
    pub n: usize,
}

impl<'a> StackedBatch<'a> {
    pub fn from_scenes(scenes: &[(&'a [DepthImage], Vec<Grasp>)], n: usize) -> Result<Self, DatasetError> {
        if scenes.is_empty() || scenes.iter().all(|(_, g)| g.is_empty()) {
            return Err(DatasetError::EmptyBatch);
        }
        let m = scenes.iter().map(|(_, g)| g.len()).max().unwrap_or(0);
        let b = scenes.len();
        let mut grasps = vec![0u8; b * m * n];
        let mut mask = vec![0u8; b * m];
        for (i, (_, gs)) in scenes.iter().enumerate() {
            for (j, g) in gs.iter().enumerate() {
                if g.0.len() != n {
                    return Err(DatasetError::Invalid(format!(
                        "grasp of length {} in a {n}-dimensional batch",
                        g.0.len()
                    )));
                }
                grasps[(i * m + j) * n..(i * m + j + 1) * n].copy_from_slice(&g.0);
                mask[i * m + j] = 1;
            }
        }
        Ok(Self {
            observations: scenes.iter().map(|(o, _)| *o).collect(),
            grasps,
            mask,
            counts: scenes.iter().map(|(_, g)| g.len()).collect(),
            m,
            n,
        })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn grasp(&self, i: usize, j: usize) -> &[u8] {
        &self.grasps[(i * self.m + j) * self.n..(i * self.m + j + 1) * self.n]
    }

    pub fn is_real(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.m + j] != 0
    }
}

/// Samples `batch_size` distinct scenes with at least one success.
pub fn make_training_batch<'a, R: Rng + ?Sized>(
    records: &'a [SceneRecord],
    batch_size: usize,
    rng: &mut R,
) -> Result<StackedBatch<'a>, DatasetError> {
    let eligible: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.success_count() > 0)
        .map(|(i, _)| i)
        .collect();
    batch_from_eligible(records, &eligible, batch_size, rng)
}

pub fn batch_from_eligible<'a, R: Rng + ?Sized>(
    records: &'a [SceneRecord],
    eligible: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Result<StackedBatch<'a>, DatasetError> {
    if eligible.is_empty() || batch_size == 0 {
        return Err(DatasetError::EmptyBatch);
    }
    if eligible.len() < batch_size {
        return Err(DatasetError::NotEnoughScenes {
            needed: batch_size,
            available: eligible.len(),
        });
    }
    let n = records[eligible[0]]
        .attempts
        .first()
        .map_or(0, |a| a.grasp.0.len());
    let picked: Vec<(&[DepthImage], Vec<Grasp>)> = sample(rng, eligible.len(), batch_size)
        .into_iter()
        .map(|k| {
            let r = &records[eligible[k]];
            (r.observations.as_slice(), r.successes().cloned().collect())
        })
        .collect();
    StackedBatch::from_scenes(&picked, n)
}

// ---------------------------------------------------------------------------
// On-disk format

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if self.pos + n > self.buf.len() {
            return Err(format_err(self.path, "truncated record"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, DatasetError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DatasetError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, DatasetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, DatasetError> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| format_err(self.path, "invalid UTF-8 string"))
    }

    fn image(&mut self) -> Result<DepthImage, DatasetError> {
        let mut rest = &self.buf[self.pos..];
        let before = rest.len();
        let img = DepthImage::read_from(&mut rest).map_err(|e| format_err(self.path, format!("image blob: {e}")))?;
        self.pos += before - rest.len();
        Ok(img)
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Label codes in the grasp table.
const LABEL_FAILED: u8 = 0;
const LABEL_SUCCESS: u8 = 1;
const LABEL_REJECTED: u8 = 2;

pub fn encode_record(rec: &SceneRecord, spec: &GraspSpec) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(RECORD_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_string(&mut out, &rec.scene_id);
    put_string(&mut out, &rec.object_id);
    out.extend_from_slice(&rec.yaw.to_le_bytes());
    out.push(spec.n() as u8);
    out.push(spec.buckets() as u8);
    out.extend_from_slice(&(rec.observations.len() as u16).to_le_bytes());
    out.extend_from_slice(&(rec.attempts.len() as u32).to_le_bytes());
    for a in &rec.attempts {
        out.extend_from_slice(&a.grasp.0);
        out.push(match (a.rejected, a.label) {
            (true, _) => LABEL_REJECTED,
            (false, true) => LABEL_SUCCESS,
            (false, false) => LABEL_FAILED,
        });
    }
    for img in &rec.observations {
        img.write_to(&mut out).expect("in-memory write");
    }
    for img in rec.attempts.iter().filter_map(|a| a.hand.as_ref()) {
        img.write_to(&mut out).expect("in-memory write");
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_record(bytes: &[u8], spec: &GraspSpec, path: &Path) -> Result<SceneRecord, DatasetError> {
    if bytes.len() < 8 {
        return Err(format_err(path, "truncated record"));
    }
    let mut c = Cursor { buf: &bytes[..bytes.len() - 4], pos: 0, path };
    if c.take(4)? != RECORD_MAGIC {
        return Err(format_err(path, "bad record magic"));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(DatasetError::Version {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let scene_id = c.string()?;
    let object_id = c.string()?;
    let yaw = c.f64()?;
    let (n, buckets) = (c.u8()? as usize, c.u8()? as usize);
    if n != spec.n() || buckets != spec.buckets() {
        return Err(format_err(path, format!("grasp space {n}x{buckets} does not match manifest")));
    }
    let views = c.u16()? as usize;
    let count = c.u32()? as usize;
    let mut attempts = Vec::with_capacity(count);
    for _ in 0..count {
        let grasp = Grasp(c.take(n)?.to_vec());
        if spec.validate(&grasp).is_err() {
            return Err(format_err(path, format!("invalid grasp {grasp}")));
        }
        let code = c.u8()?;
        let (label, rejected) = match code {
            LABEL_FAILED => (false, false),
            LABEL_SUCCESS => (true, false),
            LABEL_REJECTED => (false, true),
            _ => return Err(format_err(path, format!("unknown label code {code}"))),
        };
        attempts.push(Attempt {
            grasp,
            label,
            rejected,
            hand: None,
        });
    }
    let observations = (0..views).map(|_| c.image()).collect::<Result<Vec<_>, _>>()?;
    for a in attempts.iter_mut().filter(|a| !a.rejected) {
        a.hand = Some(c.image()?);
    }
    if c.pos != c.buf.len() {
        return Err(format_err(path, "trailing bytes before checksum"));
    }
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(c.buf) != stored {
        return Err(DatasetError::Checksum { path: path.to_path_buf() });
    }
    Ok(SceneRecord {
        scene_id,
        object_id,
        yaw,
        observations,
        attempts,
    })
}

fn manifest_text(ds: &Dataset) -> String {
    let m = &ds.manifest;
    let g = &m.gen;
    let mut lines = vec![
        format!("format_version={}", m.format_version),
        format!("name={}", m.name),
        format!("seed={}", m.seed),
        format!("object_count={}", m.object_count),
        format!("attempts_per_object={}", m.attempts_per_object),
        format!("grasp.dims={}", m.grasp.n()),
        format!("grasp.buckets={}", m.grasp.buckets()),
        format!("gen.n_parts_min={}", g.n_parts.0),
        format!("gen.n_parts_max={}", g.n_parts.1),
        format!("gen.prim_scale_min={:?}", g.prim_scale.0),
        format!("gen.prim_scale_max={:?}", g.prim_scale.1),
        format!("gen.final_size_min={:?}", g.final_size.0),
        format!("gen.final_size_max={:?}", g.final_size.1),
        format!("gen.max_placement_attempts={}", g.max_placement_attempts),
        format!("gen.max_resamples={}", g.max_resamples),
        format!("gen.voxel_resolution={}", g.voxel_resolution),
    ];
    lines.extend(m.settings.iter().map(|(k, v)| format!("setting.{k}={v}")));
    lines.extend(ds.records.iter().map(|r| format!("scene={}", r.scene_id)));
    lines.extend(ds.objects.iter().map(|o| format!("object={}", o.id)));
    let mut text = lines.join("\n");
    text.push('\n');
    text
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<(), DatasetError> {
    if ds.records.len() != ds.manifest.object_count || ds.objects.len() != ds.manifest.object_count {
        return Err(DatasetError::Invalid("manifest object count disagrees with contents".into()));
    }
    let scenes = dir.join("scenes");
    let objects = dir.join("objects");
    fs::create_dir_all(&scenes).map_err(io_err(&scenes))?;
    fs::create_dir_all(&objects).map_err(io_err(&objects))?;
    for obj in &ds.objects {
        export_mesh(obj, &objects.join(format!("{}.off", obj.id)))?;
    }
    let encoded: Vec<(PathBuf, Vec<u8>)> = ds
        .records
        .par_iter()
        .map(|r| (scenes.join(format!("{}.rec", r.scene_id)), encode_record(r, &ds.manifest.grasp)))
        .collect();
    for (path, bytes) in encoded {
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest_text(ds)).map_err(io_err(&path))
}

fn parse_kv<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<T, DatasetError> {
    map.get(key)
        .ok_or_else(|| format_err(path, format!("missing key {key}")))?
        .parse()
        .map_err(|_| format_err(path, format!("bad value for {key}")))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut kv = BTreeMap::new();
    let mut scene_ids = Vec::new();
    let mut object_ids = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format_err(&path, format!("line {}: expected key=value", k + 1)))?;
        match key {
            "scene" => scene_ids.push(value.to_string()),
            "object" => object_ids.push(value.to_string()),
            _ => {
                kv.insert(key.to_string(), value.to_string());
            }
        }
    }
    let version: u32 = parse_kv(&kv, "format_version", &path)?;
    if version != FORMAT_VERSION {
        return Err(DatasetError::Version {
            path,
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let grasp = GraspSpec::new(parse_kv(&kv, "grasp.dims", &path)?, parse_kv(&kv, "grasp.buckets", &path)?)
        .map_err(|e| format_err(&path, e.to_string()))?;
    let gen = GenParams {
        n_parts: (parse_kv(&kv, "gen.n_parts_min", &path)?, parse_kv(&kv, "gen.n_parts_max", &path)?),
        prim_scale: (parse_kv(&kv, "gen.prim_scale_min", &path)?, parse_kv(&kv, "gen.prim_scale_max", &path)?),
        final_size: (parse_kv(&kv, "gen.final_size_min", &path)?, parse_kv(&kv, "gen.final_size_max", &path)?),
        max_placement_attempts: parse_kv(&kv, "gen.max_placement_attempts", &path)?,
        max_resamples: parse_kv(&kv, "gen.max_resamples", &path)?,
        voxel_resolution: parse_kv(&kv, "gen.voxel_resolution", &path)?,
    };
    let object_count: usize = parse_kv(&kv, "object_count", &path)?;
    let scene_dir = dir.join("scenes");
    let on_disk = fs::read_dir(&scene_dir)
        .map_err(io_err(&scene_dir))?
        .filter(|e| e.as_ref().is_ok_and(|e| e.path().extension().is_some_and(|x| x == "rec")))
        .count();
    if scene_ids.len() != object_count || object_ids.len() != object_count || on_disk != object_count {
        return Err(DatasetError::CountMismatch {
            path,
            msg: format!(
                "object_count={object_count} but {} scenes listed, {} objects listed, {on_disk} scene files",
                scene_ids.len(),
                object_ids.len()
            ),
        });
    }
    let records = scene_ids
        .par_iter()
        .map(|id| {
            let p = scene_dir.join(format!("{id}.rec"));
            let bytes = fs::read(&p).map_err(io_err(&p))?;
            decode_record(&bytes, &grasp, &p)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let objects = object_ids
        .iter()
        .map(|id| {
            let p = dir.join("objects").join(format!("{id}.off"));
            let mut obj = import_mesh(&p, TargetSize::Keep)?;
            obj.id = id.clone();
            Ok(obj)
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let settings = kv
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("setting.").map(|k| (k.to_string(), v.clone())))
        .collect();
    Ok(Dataset {
        manifest: DatasetManifest {
            name: kv.get("name").cloned().unwrap_or_default(),
            grasp,
            gen,
            object_count,
            attempts_per_object: parse_kv(&kv, "attempts_per_object", &path)?,
            seed: parse_kv(&kv, "seed", &path)?,
            format_version: version,
            settings,
        },
        objects,
        records,
    })
}

/// Noise settings used when a dataset's observations were rendered.
pub fn noise_from_settings(settings: &BTreeMap<String, String>) -> Option<NoiseParams> {
    Some(NoiseParams {
        enabled: settings.get("noise.enabled")?.parse().ok()?,
        gamma_shape: settings.get("noise.gamma_shape")?.parse().ok()?,
        gamma_scale: settings.get("noise.gamma_scale")?.parse().ok()?,
        gaussian_sigma: settings.get("noise.gaussian_sigma")?.parse().ok()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectgen::{box_mesh, object_from_mesh};
    use rand::SeedableRng;

    fn small_dataset() -> Dataset {
        let sim = SimConfig::default();
        generate_dataset("t", 5, 3, false, 40, &GenParams::default(), &sim).unwrap()
    }

    #[test]
    fn ungraspable_cube_has_no_planner_rows() {
        let obj = object_from_mesh(&box_mesh([0.14; 3]), "big".into(), TargetSize::Keep, 64);
        let recs = generate_scene_records(&[obj], 1, &SimConfig::default(), 0).unwrap();
        assert_eq!(recs[0].attempts.len(), 1);
        assert!(!recs[0].attempts[0].label);
        assert_eq!(recs[0].success_count(), 0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(make_training_batch(&recs, 1, &mut rng), Err(DatasetError::EmptyBatch)));
    }

    #[test]
    fn generation_is_deterministic_and_labels_consistent() {
        let a = small_dataset();
        let b = small_dataset();
        assert_eq!(a.records, b.records);
        for r in &a.records {
            for at in &r.attempts {
                assert_eq!(at.hand.is_some(), !at.rejected);
                assert!(!(at.rejected && at.label));
            }
        }
        assert!(a.objects.iter().all(|o| !is_held_out(&o.id)));
        let held = split_indices(5, 3, true);
        assert!(held.iter().all(|&i| is_held_out(&crate::objectgen::object_id(5, i))));
    }

    #[test]
    fn stacked_padding_layout() {
        let img = vec![DepthImage::filled(2, 2, 0.5)];
        let g = |v: u8| Grasp(vec![v; 4]);
        let batch = StackedBatch::from_scenes(
            &[(img.as_slice(), vec![g(1), g(2)]), (img.as_slice(), (0..5).map(g).collect())],
            4,
        )
        .unwrap();
        assert_eq!(batch.m, 5);
        assert_eq!(&batch.mask[..5], &[1, 1, 0, 0, 0]);
        assert_eq!(batch.grasp(0, 3), &[0, 0, 0, 0]);
        assert_eq!(batch.counts, vec![2, 5]);
        let single = StackedBatch::from_scenes(&[(img.as_slice(), vec![g(3)])], 4).unwrap();
        assert_eq!(single.mask, vec![1]);
    }

    #[test]
    fn round_trip_and_corruption() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.records, ds.records);
        assert_eq!(back.manifest, ds.manifest);
        for (a, b) in back.objects.iter().zip(&ds.objects) {
            assert!((a.bbox.min - b.bbox.min).norm() < 1e-9);
        }

        let manifest = dir.path().join("manifest.txt");
        let text = fs::read_to_string(&manifest).unwrap();
        fs::write(&manifest, text.replace("object_count=3", "object_count=4")).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DatasetError::CountMismatch { .. })));
        fs::write(&manifest, &text).unwrap();

        let rec = dir.path().join("scenes").join(format!("{}.rec", ds.records[1].scene_id));
        let mut bytes = fs::read(&rec).unwrap();
        let header = 4 + 4 + 2 + ds.records[1].scene_id.len() + 2 + ds.records[1].object_id.len() + 8 + 2 + 2 + 4;
        let image_at = header + ds.records[1].attempts.len() * 5;
        assert_eq!(&bytes[image_at..image_at + 4], b"GFDI");
        bytes[image_at] = b'X';
        fs::write(&rec, &bytes).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains(&ds.records[1].scene_id), "{err}");
        bytes[image_at] = b'G';
        let last = bytes.len() - 10;
        bytes[last] ^= 1;
        fs::write(&rec, &bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DatasetError::Checksum { .. })));
    }

    #[test]
    fn writes_are_byte_identical() {
        let ds = small_dataset();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_dataset(&ds, a.path()).unwrap();
        write_dataset(&small_dataset(), b.path()).unwrap();
        for name in ["manifest.txt".to_string(), format!("scenes/{}.rec", ds.records[0].scene_id)] {
            assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
        }
    }

    #[test]
    fn uniform_grasp_sampling_chi_square() {
        let spec = GraspSpec::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut counts = [[0usize; 20]; 4];
        let draws = 100_000;
        for _ in 0..draws {
            let g = spec.sample_uniform(&mut rng);
            for (d, &b) in g.0.iter().enumerate() {
                counts[d][b as usize] += 1;
            }
        }
        let expected = draws as f64 / 20.0;
        for c in counts {
            let chi2: f64 = c.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
            // 19 degrees of freedom, p = 0.001.
            assert!(chi2 < 43.82, "{chi2}");
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn record_round_trip(
            yaw in 0.0f64..6.3,
            rows in proptest::collection::vec((proptest::collection::vec(0u8..20, 4), 0u8..3), 0..30),
        ) {
            let spec = GraspSpec::default();
            let hand = |k: usize| DepthImage { height: 2, width: 2, data: vec![k as f32 * 0.01; 4] };
            let attempts: Vec<Attempt> = rows
                .iter()
                .enumerate()
                .map(|(k, (g, code))| Attempt {
                    grasp: Grasp(g.clone()),
                    label: *code == 1,
                    rejected: *code == 2,
                    hand: (*code != 2).then(|| hand(k)),
                })
                .collect();
            let rec = SceneRecord {
                scene_id: "r0-000001-s0".into(),
                object_id: "r0-000001".into(),
                yaw,
                observations: vec![hand(99)],
                attempts,
            };
            let bytes = encode_record(&rec, &spec);
            let back = decode_record(&bytes, &spec, Path::new("x.rec")).unwrap();
            proptest::prop_assert_eq!(back, rec);
        }
    }
}
