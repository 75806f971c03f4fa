//! Class-incremental task streams, dataset manifests and the synthetic
//! subaction dataset.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};

pub type ClassId = usize;

/// The ordered class groups of an incremental scenario. Group 0 is the
/// initial stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStream {
    pub seed: u64,
    pub class_order: Vec<ClassId>,
    pub groups: Vec<Vec<ClassId>>,
}

impl TaskStream {
    pub fn n_stages(&self) -> usize {
        self.groups.len()
    }

    /// Union of groups `0..=stage`, in stream order.
    pub fn seen_classes(&self, stage: usize) -> Vec<ClassId> {
        self.groups
            .iter()
            .take(stage + 1)
            .flat_map(|g| g.iter().copied())
            .collect()
    }

    pub fn stage_of(&self, class: ClassId) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&class))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stream: TaskStream = serde_json::from_str(text)?;
        stream.validate()?;
        Ok(stream)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in self.groups.iter().flatten() {
            if !seen.insert(*c) {
                return Err(Error::Config(format!("class {c} appears in more than one group")));
            }
        }
        let order: BTreeSet<_> = self.class_order.iter().copied().collect();
        if order != seen || order.len() != self.class_order.len() {
            return Err(Error::Config("groups do not partition class_order".into()));
        }
        Ok(())
    }
}

/// Shuffles `class_ids` with a seeded generator and splits the shuffled order
/// into an initial group of `initial_count` classes followed by equal groups
/// of `group_size`.
///
/// `initial_count` may equal the number of classes, giving a one-stage stream.
pub fn build_task_stream(
    class_ids: &[ClassId],
    seed: u64,
    initial_count: usize,
    group_size: usize,
) -> Result<TaskStream> {
    let mut order: Vec<ClassId> = class_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if order.len() != class_ids.len() {
        return Err(Error::Config("class ids must be distinct".into()));
    }
    let n = order.len();
    if initial_count == 0 || initial_count > n {
        return Err(Error::Config(format!(
            "initial class count {initial_count} must be in 1..={n}"
        )));
    }
    let remainder = n - initial_count;
    if remainder > 0 && (group_size == 0 || remainder % group_size != 0) {
        return Err(Error::Config(format!(
            "{remainder} remaining classes cannot be split into equal groups of {group_size}"
        )));
    }
    order.shuffle(&mut rng_for(seed, &[tag::CLASS_ORDER]));

    let mut groups = vec![order[..initial_count].to_vec()];
    if remainder > 0 {
        groups.extend(order[initial_count..].chunks(group_size).map(<[_]>::to_vec));
    }
    Ok(TaskStream {
        seed,
        class_order: order,
        groups,
    })
}

/// Where a sample came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleOrigin {
    Manifest { path: PathBuf, line: usize },
    Synthetic { seed: u64, class: ClassId, index: usize },
}

/// A clip of frames `[frames × channels × H × W]` with its label.
///
/// Raw clips may hold more frames than the model consumes; the model input is
/// always a `T`-frame selection produced by `memory::sample_frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub frames: Array4<f64>,
    pub label: ClassId,
    pub origin: SampleOrigin,
}

impl VideoSample {
    pub fn n_frames(&self) -> usize {
        self.frames.dim().0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub motifs_per_class: usize,
    pub shared_prefix_pairs: Vec<(ClassId, ClassId)>,
    pub noise_level: f64,
    /// Frames per model input.
    pub t: usize,
    /// Frames per raw clip; at least `t` and divisible by `motifs_per_class`.
    pub frames_per_video: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
}

const PATTERN: usize = 3;
const N_PATTERNS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Direction {
    Right,
    Left,
    Down,
    Up,
}

impl Direction {
    const ALL: [Direction; 4] = [Direction::Right, Direction::Left, Direction::Down, Direction::Up];

    fn reversed(self) -> Self {
        match self {
            Direction::Right => Direction::Left,
            Direction::Left => Direction::Right,
            Direction::Down => Direction::Up,
            Direction::Up => Direction::Down,
        }
    }
}

/// A spatial pattern translated across the frame in one direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Motif {
    pattern: usize,
    direction: Direction,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes == 0 || self.motifs_per_class == 0 || self.channels == 0 {
            return bad("n_classes, motifs_per_class and channels must be positive".into());
        }
        if self.t == 0 || self.frames_per_video < self.t {
            return bad(format!(
                "frames_per_video {} must be at least t {}",
                self.frames_per_video, self.t
            ));
        }
        if self.frames_per_video % self.motifs_per_class != 0
            || self.frames_per_video / self.motifs_per_class < 2
        {
            return bad(format!(
                "frames_per_video {} must split into {} motif segments of at least 2 frames",
                self.frames_per_video, self.motifs_per_class
            ));
        }
        if self.height < PATTERN + 1 || self.width < PATTERN + 1 {
            return bad(format!("frames must be at least {0}x{0}", PATTERN + 1));
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return bad("noise_level must be a nonnegative real".into());
        }
        let mut paired = BTreeSet::new();
        for &(a, b) in &self.shared_prefix_pairs {
            if a == b || a >= self.n_classes || b >= self.n_classes {
                return bad(format!("invalid shared-prefix pair ({a}, {b})"));
            }
            if !paired.insert(a) || !paired.insert(b) {
                return bad(format!("class in pair ({a}, {b}) is already paired"));
            }
        }
        let space = (N_PATTERNS * Direction::ALL.len()).pow(self.motifs_per_class.min(8) as u32);
        if self.n_classes > space {
            return bad(format!("only {space} distinct motif sequences available"));
        }
        Ok(())
    }

    fn segment_len(&self) -> usize {
        self.frames_per_video / self.motifs_per_class
    }

    fn patterns(&self) -> Vec<(Array3<f64>, Vec<f64>)> {
        let mut rng = rng_for(self.seed, &[tag::MOTIFS, 0]);
        let mut shapes: Vec<[bool; PATTERN * PATTERN]> = Vec::new();
        while shapes.len() < N_PATTERNS {
            let mut cells = [false; PATTERN * PATTERN];
            for c in cells.iter_mut() {
                *c = rng.random_bool(0.5);
            }
            let on = cells.iter().filter(|&&c| c).count();
            if (4..=7).contains(&on) && !shapes.contains(&cells) {
                shapes.push(cells);
            }
        }
        shapes
            .into_iter()
            .map(|cells| {
                let grid = Array3::from_shape_fn((1, PATTERN, PATTERN), |(_, y, x)| {
                    if cells[y * PATTERN + x] {
                        1.0
                    } else {
                        0.0
                    }
                });
                let colour: Vec<f64> = (0..self.channels)
                    .map(|_| rng.random_range(0.5..1.0))
                    .collect();
                (grid, colour)
            })
            .collect()
    }

    /// Motif sequences per class. Paired classes share every motif but the
    /// last, whose direction is reversed.
    fn class_motifs(&self) -> Vec<Vec<Motif>> {
        let mut rng = rng_for(self.seed, &[tag::MOTIFS, 1]);
        let partner = |c: ClassId| {
            self.shared_prefix_pairs.iter().find_map(|&(a, b)| {
                if a == c {
                    Some(b)
                } else if b == c {
                    Some(a)
                } else {
                    None
                }
            })
        };
        let mut seqs: Vec<Option<Vec<Motif>>> = vec![None; self.n_classes];
        let mut used = BTreeSet::new();
        for c in 0..self.n_classes {
            if seqs[c].is_some() {
                continue;
            }
            loop {
                let seq: Vec<Motif> = (0..self.motifs_per_class)
                    .map(|_| Motif {
                        pattern: rng.random_range(0..N_PATTERNS),
                        direction: Direction::ALL[rng.random_range(0..4)],
                    })
                    .collect();
                let mut twin = seq.clone();
                let last = twin.last_mut().expect("motifs_per_class >= 1");
                last.direction = last.direction.reversed();
                if used.contains(&seq) || (partner(c).is_some() && used.contains(&twin)) {
                    continue;
                }
                used.insert(seq.clone());
                if let Some(p) = partner(c) {
                    used.insert(twin.clone());
                    seqs[p] = Some(twin);
                }
                seqs[c] = Some(seq);
                break;
            }
        }
        seqs.into_iter().map(|s| s.expect("all classes assigned")).collect()
    }
}

/// Renders the clean (noise-free, unit-amplitude) clip for a motif sequence.
fn render(
    spec: &SyntheticSpec,
    patterns: &[(Array3<f64>, Vec<f64>)],
    motifs: &[Motif],
    lanes: &[usize],
) -> Array4<f64> {
    let seg = spec.segment_len();
    let mut frames = Array4::zeros((spec.frames_per_video, spec.channels, spec.height, spec.width));
    for (m, motif) in motifs.iter().enumerate() {
        let (grid, colour) = &patterns[motif.pattern];
        let horizontal = matches!(motif.direction, Direction::Right | Direction::Left);
        let travel = if horizontal { spec.width } else { spec.height } - PATTERN;
        for i in 0..seg {
            let step = match motif.direction {
                Direction::Right | Direction::Down => i,
                Direction::Left | Direction::Up => seg - 1 - i,
            };
            let along = (step * travel + (seg - 1) / 2) / (seg - 1);
            let (y0, x0) = if horizontal {
                (lanes[m], along)
            } else {
                (along, lanes[m])
            };
            let f = m * seg + i;
            for (ch, &col) in colour.iter().enumerate() {
                let mut view = frames.slice_mut(s![f, ch, y0..y0 + PATTERN, x0..x0 + PATTERN]);
                view.zip_mut_with(&grid.slice(s![0, .., ..]), |d, &g| *d += col * g);
            }
        }
    }
    frames
}

/// Generates `samples_per_class` clips for every class.
///
/// Per-sample variation (motif lanes and amplitude) depends only on the
/// sample index, so sample `i` of two shared-prefix classes shows the same
/// frames with the final segment in reversed order.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, samples_per_class: usize) -> Result<Vec<VideoSample>> {
    spec.validate()?;
    let patterns = spec.patterns();
    let motifs = spec.class_motifs();
    let noise = Normal::new(0.0, spec.noise_level.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;

    let mut jitter: Vec<(Vec<usize>, f64)> = Vec::with_capacity(samples_per_class);
    for i in 0..samples_per_class {
        let mut rng = rng_for(spec.seed, &[tag::JITTER, i as u64]);
        let lanes = (0..spec.motifs_per_class)
            .map(|_| rng.random_range(0..=spec.height.min(spec.width) - PATTERN))
            .collect();
        jitter.push((lanes, rng.random_range(0.75..1.25)));
    }

    let mut out = Vec::with_capacity(spec.n_classes * samples_per_class);
    for (class, seq) in motifs.iter().enumerate() {
        for (index, (lanes, amplitude)) in jitter.iter().enumerate() {
            let mut frames = render(spec, &patterns, seq, lanes);
            frames.mapv_inplace(|v| v * amplitude);
            if spec.noise_level > 0.0 {
                let mut rng = rng_for(spec.seed, &[tag::NOISE, class as u64, index as u64]);
                frames.mapv_inplace(|v| v + noise.sample(&mut rng));
            }
            out.push(VideoSample {
                id: format!("syn-{}-c{class}-{index}", spec.seed),
                frames,
                label: class,
                origin: SampleOrigin::Synthetic {
                    seed: spec.seed,
                    class,
                    index,
                },
            });
        }
    }
    Ok(out)
}

/// One manifest record: a clip stored on disk, decoded on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoDescriptor {
    pub path: PathBuf,
    pub label: ClassId,
    pub frame_count: usize,
    pub line: usize,
}

impl VideoDescriptor {
    /// Reads the clip. The file is a tensor archive holding a `frames`
    /// tensor of shape `[frames, channels, H, W]`.
    pub fn load(&self) -> Result<VideoSample> {
        let archive = TensorArchive::load(&self.path)?;
        let (shape, values) = archive.get("frames")?;
        let dims: [usize; 4] = shape
            .as_slice()
            .try_into()
            .map_err(|_| Error::Shape(format!("{}: frames must be 4-D, got {shape:?}", self.path.display())))?;
        if dims[0] != self.frame_count {
            return Err(Error::Shape(format!(
                "{}: manifest says {} frames, file holds {}",
                self.path.display(),
                self.frame_count,
                dims[0]
            )));
        }
        let frames = Array4::from_shape_vec(dims, values).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(VideoSample {
            id: self.path.display().to_string(),
            frames,
            label: self.label,
            origin: SampleOrigin::Manifest {
                path: self.path.clone(),
                line: self.line,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<VideoDescriptor>,
    pub rejected: Vec<ManifestRejection>,
}

/// Parses a `path<TAB>label<TAB>frame_count` manifest. Records with fewer
/// than `t` frames are rejected with a warning; malformed lines are errors.
/// Relative clip paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path, t: usize) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut manifest = Manifest::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let fields: Vec<&str> = raw.split('\t').collect();
        let [clip, label, count] = fields[..] else {
            return Err(parse_err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        };
        let label: ClassId = label
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad label `{label}`")))?;
        let frame_count: usize = count
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad frame count `{count}`")))?;
        if frame_count < t {
            let reason = format!("{frame_count} frames, need at least {t}");
            log::warn!("{}:{line}: record rejected: {reason}", path.display());
            manifest.rejected.push(ManifestRejection { line, reason });
            continue;
        }
        manifest.records.push(VideoDescriptor {
            path: base.join(clip),
            label,
            frame_count,
            line,
        });
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            n_classes: 8,
            motifs_per_class: 2,
            shared_prefix_pairs: vec![(0, 1), (2, 3)],
            noise_level: 0.0,
            t: 8,
            frames_per_video: 16,
            height: 8,
            width: 8,
            channels: 1,
            seed: 7,
        }
    }

    #[test]
    fn stream_sizes_match_published_splits() {
        let ucf: Vec<_> = (0..101).collect();
        let s = build_task_stream(&ucf, 1000, 51, 10).unwrap();
        assert_eq!(s.n_stages(), 6);
        assert_eq!(s.groups[0].len(), 51);
        assert!(s.groups[1..].iter().all(|g| g.len() == 10));

        let hmdb: Vec<_> = (0..51).collect();
        let s = build_task_stream(&hmdb, 1993, 26, 5).unwrap();
        assert_eq!(s.n_stages(), 6);
    }

    #[test]
    fn single_increment_and_ragged_rejection() {
        let ids: Vec<_> = (0..10).collect();
        let s = build_task_stream(&ids, 1, 5, 5).unwrap();
        assert_eq!(s.groups.len(), 2);
        assert!(s.groups.iter().all(|g| g.len() == 5));
        assert!(matches!(build_task_stream(&ids, 1, 5, 3), Err(Error::Config(_))));
    }

    #[test]
    fn initial_stage_is_head_of_shuffled_order() {
        let ids: Vec<_> = (0..10).collect();
        let s = build_task_stream(&ids, 2021, 4, 2).unwrap();
        assert_eq!(s.groups[0], s.class_order[..4]);
        assert_eq!(s, build_task_stream(&ids, 2021, 4, 2).unwrap());
        assert_ne!(s.class_order, build_task_stream(&ids, 2022, 4, 2).unwrap().class_order);
    }

    #[test]
    fn one_stage_stream() {
        let s = build_task_stream(&[3, 4, 5], 9, 3, 0).unwrap();
        assert_eq!(s.n_stages(), 1);
    }

    proptest! {
        #[test]
        fn groups_partition_the_class_set(seed in any::<u64>(), n_groups in 0usize..6, g in 1usize..5, init in 1usize..8) {
            let ids: Vec<_> = (0..init + n_groups * g).map(|c| c * 3 + 1).collect();
            let s = build_task_stream(&ids, seed, init, g).unwrap();
            let mut all: Vec<_> = s.groups.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(&all, &ids);
            prop_assert_eq!(s.groups[0].len(), init);
            prop_assert!(s.groups[1..].iter().all(|grp| grp.len() == g));
            let back = TaskStream::from_json(&s.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, s);
        }
    }

    #[test]
    fn synthetic_cardinality_and_determinism() {
        let a = generate_synthetic_dataset(&spec(), 30).unwrap();
        assert_eq!(a.len(), 240);
        assert!(a.iter().all(|v| v.frames.dim() == (16, 1, 8, 8)));
        let b = generate_synthetic_dataset(&spec(), 30).unwrap();
        assert_eq!(a, b);

        let noisy = SyntheticSpec {
            noise_level: 0.1,
            ..spec()
        };
        assert_eq!(
            generate_synthetic_dataset(&noisy, 3).unwrap(),
            generate_synthetic_dataset(&noisy, 3).unwrap()
        );
    }

    fn frame_multiset(frames: ndarray::ArrayView4<f64>) -> Vec<Vec<u64>> {
        let mut v: Vec<Vec<u64>> = frames
            .outer_iter()
            .map(|f| f.iter().map(|x| x.to_bits()).collect())
            .collect();
        v.sort();
        v
    }

    #[test]
    fn shared_prefix_pairs_differ_only_in_final_motif_order() {
        let sp = spec();
        let data = generate_synthetic_dataset(&sp, 5).unwrap();
        let seg = sp.frames_per_video / sp.motifs_per_class;
        for i in 0..5 {
            let a = &data[i].frames;
            let b = &data[5 + i].frames;
            assert_eq!(a.slice(s![..seg, .., .., ..]), b.slice(s![..seg, .., .., ..]));
            assert_ne!(a, b);
            assert_eq!(frame_multiset(a.view()), frame_multiset(b.view()));
            let ta = a.mean_axis(ndarray::Axis(0)).unwrap();
            let tb = b.mean_axis(ndarray::Axis(0)).unwrap();
            assert!(ta.iter().zip(tb.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        }
        // unpaired classes are distinct clips
        let c4 = &data[20].frames;
        let c5 = &data[25].frames;
        assert_ne!(c4, c5);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec();
        s.shared_prefix_pairs = vec![(0, 1), (1, 2)];
        assert!(s.validate().is_err());
        let mut s = spec();
        s.frames_per_video = 4;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.noise_level = -1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn manifest_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        fs::write(&p, "").unwrap();
        assert!(load_manifest(&p, 8).unwrap().records.is_empty());

        fs::write(&p, "clips/a.json\t3\t16\n").unwrap();
        let m = load_manifest(&p, 8).unwrap();
        assert_eq!(m.records.len(), 1);
        assert_eq!(m.records[0].label, 3);
        assert_eq!(m.records[0].path, dir.path().join("clips/a.json"));

        fs::write(&p, "a.json\t3\t16\nb.json\t1\t7\n").unwrap();
        let m = load_manifest(&p, 8).unwrap();
        assert_eq!(m.records.len(), 1);
        assert_eq!(m.rejected, vec![ManifestRejection { line: 2, reason: "7 frames, need at least 8".into() }]);

        fs::write(&p, "a.json\t3\t16\nbroken line\n").unwrap();
        match load_manifest(&p, 8) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_clip_loads_lazily() {
        let dir = tempfile::tempdir().unwrap();
        let mut arch = TensorArchive::new(serde_json::json!({}));
        let vals: Vec<f64> = (0..9 * 2 * 2).map(f64::from).collect();
        arch.insert("frames", &[9, 1, 2, 2], &vals).unwrap();
        arch.save(&dir.path().join("c.json")).unwrap();
        fs::write(dir.path().join("m.tsv"), "c.json\t2\t9\n").unwrap();
        let m = load_manifest(&dir.path().join("m.tsv"), 8).unwrap();
        let clip = m.records[0].load().unwrap();
        assert_eq!(clip.label, 2);
        assert_eq!(clip.frames.dim(), (9, 1, 2, 2));
        assert_eq!(clip.frames[[8, 0, 1, 1]], 35.0);
    }
}
