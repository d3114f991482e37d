//! Calibration/evaluation dataset ingestion plus the synthetic-domain
//! generator used by the desk-scale fixtures.
//!
//! Samples are XTEN tensors (`C x H x W`), ordered by lexicographic file
//! name so iteration is stable across runs and platforms. The generator
//! uses only ChaCha-derived uniforms and elementary arithmetic (triangle
//! waves, rational falloffs, uniform-sum noise), which keeps generated
//! domains byte-identical everywhere.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ops::resize_bilinear;
use crate::tensor::{Dtype, Tensor};
use crate::xten;

/// One NCHW chunk of a dataset. `index` identifies the batch within the
/// dataset's canonical order and `start` is the position of its first
/// sample; statistics accumulators key their partial results on `index`,
/// which makes reductions independent of batch arrival order.
#[derive(Debug, Clone)]
pub struct Batch {
    pub index: usize,
    pub start: usize,
    pub data: Tensor,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub target_hw: (usize, usize),
    pub channels: usize,
    pub norm_mean: Vec<f32>,
    pub norm_std: Vec<f32>,
    /// Read `*.ppm` (binary P6) images instead of `*.xten` tensors.
    pub from_ppm: bool,
}

impl LoadOptions {
    /// Options matching a model's declared input shape and normalization.
    pub fn for_model(graph: &Graph) -> LoadOptions {
        let meta = graph.metadata();
        LoadOptions {
            target_hw: (meta.input_shape[2], meta.input_shape[3]),
            channels: meta.input_shape[1],
            norm_mean: meta.norm_mean.clone(),
            norm_std: meta.norm_std.clone(),
            from_ppm: false,
        }
    }

    /// Pass-through options: native size, no normalization.
    pub fn raw(channels: usize, target_hw: (usize, usize)) -> LoadOptions {
        LoadOptions {
            target_hw,
            channels,
            norm_mean: vec![0.0; channels],
            norm_std: vec![1.0; channels],
            from_ppm: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    names: Vec<String>,
    samples: Vec<Tensor>,
    labels: Option<Vec<usize>>,
    masks: Option<Vec<Tensor>>,
    channels: usize,
}

impl Dataset {
    /// Load every sample under `root`, resized to the target size and
    /// normalized with the provided per-channel constants.
    pub fn load(root: &Path, opts: &LoadOptions) -> Result<Dataset> {
        let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let sample_ext = if opts.from_ppm { ".ppm" } else { ".xten" };
        let mut names: Vec<String> = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(root, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.ends_with(sample_ext) && !name.ends_with(".mask.xten") {
                names.push(name);
            }
        }
        if names.is_empty() {
            return Err(Error::EmptyDataset);
        }
        names.sort();

        let mut samples = Vec::with_capacity(names.len());
        for name in &names {
            let path = root.join(name);
            let raw = if opts.from_ppm {
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                ppm_to_tensor(&bytes, &path)?
            } else {
                xten::read(&path)?
            };
            samples.push(prepare_sample(&raw, opts, &path)?);
        }

        let labels = read_labels(root, &names)?;
        let masks = read_masks(root, &names)?;
        Ok(Dataset {
            root: root.to_path_buf(),
            names,
            samples,
            labels,
            masks,
            channels: opts.channels,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn sample(&self, i: usize) -> &Tensor {
        &self.samples[i]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn masks(&self) -> Option<&[Tensor]> {
        self.masks.as_deref()
    }

    /// Fixed-order batches; the last one may be short.
    pub fn batches(&self, batch_size: usize) -> Vec<Batch> {
        assert!(batch_size > 0, "batch size must be >= 1");
        let mut out = Vec::new();
        let mut start = 0;
        let mut index = 0;
        while start < self.samples.len() {
            let end = (start + batch_size).min(self.samples.len());
            out.push(Batch {
                index,
                start,
                data: stack_samples(&self.samples[start..end]),
            });
            start = end;
            index += 1;
        }
        out
    }
}

fn prepare_sample(raw: &Tensor, opts: &LoadOptions, path: &Path) -> Result<Tensor> {
    let shape = raw.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::format(
            path,
            format!("sample must be C x H x W, got shape {shape:?}"),
        ));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if c != opts.channels {
        return Err(Error::format(
            path,
            format!("sample has {c} channels, expected {}", opts.channels),
        ));
    }
    let mut t = match raw.dtype() {
        Dtype::F32 => raw.clone(),
        // Integer images are interpreted as 8-bit intensities.
        Dtype::U8 => Tensor::from_f32(
            &shape,
            raw.as_u8()?.iter().map(|&v| v as f32 / 255.0).collect(),
        ),
        Dtype::I32 => {
            return Err(Error::format(path, "i32 samples are not supported".to_string()))
        }
    };
    if (h, w) != opts.target_hw {
        let batched = t.reshape(&[1, c, h, w])?;
        t = resize_bilinear(&batched, opts.target_hw.0, opts.target_hw.1)?
            .reshape(&[c, opts.target_hw.0, opts.target_hw.1])?;
    } else {
        t = t.reshape(&[c, h, w])?;
    }
    let data = t.as_f32_mut()?;
    let spatial = opts.target_hw.0 * opts.target_hw.1;
    for ch in 0..c {
        let (m, s) = (opts.norm_mean[ch], opts.norm_std[ch]);
        if m != 0.0 || s != 1.0 {
            for v in &mut data[ch * spatial..(ch + 1) * spatial] {
                *v = (*v - m) / s;
            }
        }
    }
    Ok(t)
}

fn stack_samples(samples: &[Tensor]) -> Tensor {
    let shape = samples[0].shape();
    let mut data = Vec::with_capacity(samples.len() * samples[0].len());
    for s in samples {
        data.extend_from_slice(s.as_f32().expect("samples are f32"));
    }
    let mut full = vec![samples.len()];
    full.extend_from_slice(shape);
    Tensor::from_f32(&full, data)
}

fn read_labels(root: &Path, names: &[String]) -> Result<Option<Vec<usize>>> {
    let path = root.join("labels.csv");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut by_name: HashMap<&str, usize> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line == "filename,label" {
            continue;
        }
        let (name, label) = line.split_once(',').ok_or_else(|| {
            Error::format(&path, format!("line {}: expected `filename,label`", lineno + 1))
        })?;
        let label = label.trim().parse::<usize>().map_err(|_| {
            Error::format(&path, format!("line {}: bad label `{label}`", lineno + 1))
        })?;
        by_name.insert(name.trim(), label);
    }
    let mut labels = Vec::with_capacity(names.len());
    for name in names {
        match by_name.get(name.as_str()) {
            Some(&l) => labels.push(l),
            None => {
                return Err(Error::format(
                    &path,
                    format!("no label for sample `{name}`"),
                ))
            }
        }
    }
    Ok(Some(labels))
}

fn read_masks(root: &Path, names: &[String]) -> Result<Option<Vec<Tensor>>> {
    let mask_path = |name: &str| {
        let stem = name.strip_suffix(".xten").unwrap_or(name);
        root.join(format!("{stem}.mask.xten"))
    };
    let present: Vec<bool> = names.iter().map(|n| mask_path(n).exists()).collect();
    if !present.iter().any(|&p| p) {
        return Ok(None);
    }
    if !present.iter().all(|&p| p) {
        return Err(Error::format(
            root,
            "some samples have .mask.xten files and some do not".to_string(),
        ));
    }
    let mut masks = Vec::with_capacity(names.len());
    for name in names {
        masks.push(xten::read(&mask_path(name))?);
    }
    Ok(Some(masks))
}

// ── Synthetic-domain generator ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternFamily {
    Stripes,
    Blobs,
    Checker,
}

impl PatternFamily {
    pub fn name(self) -> &'static str {
        match self {
            PatternFamily::Stripes => "stripes",
            PatternFamily::Blobs => "blobs",
            PatternFamily::Checker => "checker",
        }
    }

    pub fn parse(s: &str) -> Option<PatternFamily> {
        match s {
            "stripes" => Some(PatternFamily::Stripes),
            "blobs" => Some(PatternFamily::Blobs),
            "checker" => Some(PatternFamily::Checker),
            _ => None,
        }
    }
}

/// Deterministic recipe for one synthetic image domain. Identical specs
/// produce byte-identical datasets; `shift`, `contrast` and `noise` control
/// how far the domain drifts from its zero-shift base.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub seed: u64,
    pub family: PatternFamily,
    /// Per-channel intensity shift; its length fixes the channel count.
    pub shift: Vec<f32>,
    pub contrast: f32,
    pub noise: f32,
    pub height: usize,
    pub width: usize,
}

pub const CLASSES_PER_FAMILY: usize = 3;

/// Approximate standard normal from 12 uniforms; avoids transcendental
/// functions so generation is bit-stable across platforms.
pub(crate) fn uniform_sum_normal(rng: &mut ChaCha8Rng) -> f32 {
    let mut acc = 0.0f32;
    for _ in 0..12 {
        acc += rng.gen::<f32>();
    }
    acc - 6.0
}

fn triangle(u: f32) -> f32 {
    let f = u - u.floor();
    (2.0 * f - 1.0).abs()
}

/// Render one sample. `class` selects the variant within the family:
/// stripe orientation, blob count, or checker cell size.
fn render_sample(spec: &DomainSpec, class: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let channels = spec.shift.len();
    let (h, w) = (spec.height, spec.width);
    let mut gain = vec![0.0f32; channels];
    let mut base = vec![0.0f32; channels];
    for c in 0..channels {
        gain[c] = rng.gen_range(0.7..1.3);
        base[c] = rng.gen_range(0.05..0.35);
    }

    // Channel-independent pattern intensity in roughly [0, 1].
    let mut pattern = vec![0.0f32; h * w];
    match spec.family {
        PatternFamily::Stripes => {
            let freq = rng.gen_range(1.0..6.0);
            let phase = rng.gen_range(0.0..1.0);
            let amp = rng.gen_range(0.4..0.9);
            // Stripe orientations 0/35/70 degrees; close enough that the
            // classes are genuinely confusable.
            let (cos_t, sin_t) = match class % CLASSES_PER_FAMILY {
                0 => (1.0f32, 0.0f32),
                1 => (0.81915, 0.57358),
                _ => (0.34202, 0.93969),
            };
            for y in 0..h {
                for x in 0..w {
                    let t = cos_t * y as f32 / h as f32 + sin_t * x as f32 / w as f32;
                    pattern[y * w + x] = amp * triangle(freq * t + phase);
                }
            }
        }
        PatternFamily::Blobs => {
            let count = class % CLASSES_PER_FAMILY + 1;
            for _ in 0..count {
                let cy = rng.gen_range(0.15..0.85);
                let cx = rng.gen_range(0.15..0.85);
                let r = rng.gen_range(0.2..0.38);
                let amp = rng.gen_range(0.5..0.8);
                for y in 0..h {
                    for x in 0..w {
                        let dy = y as f32 / h as f32 - cy;
                        let dx = x as f32 / w as f32 - cx;
                        let d2 = (dy * dy + dx * dx) / (r * r);
                        pattern[y * w + x] += amp / (1.0 + 3.0 * d2);
                    }
                }
            }
        }
        PatternFamily::Checker => {
            let cell = [3usize, 5, 8][class % CLASSES_PER_FAMILY];
            let oy = rng.gen_range(0..cell);
            let ox = rng.gen_range(0..cell);
            let amp = rng.gen_range(0.5..0.9);
            for y in 0..h {
                for x in 0..w {
                    let parity = ((y + oy) / cell + (x + ox) / cell) % 2;
                    pattern[y * w + x] = amp * parity as f32;
                }
            }
        }
    }

    let mut data = vec![0.0f32; channels * h * w];
    for c in 0..channels {
        for i in 0..h * w {
            let v = base[c] + gain[c] * pattern[i];
            data[c * h * w + i] = spec.contrast * v + spec.shift[c];
        }
    }
    // Noise is always drawn so that specs differing only in `noise` share
    // the same underlying pattern stream.
    for v in &mut data {
        *v += spec.noise * uniform_sum_normal(rng);
    }
    Tensor::from_f32(&[channels, h, w], data)
}

/// Generate `n` labeled samples in memory, in dataset order.
pub fn generate_domain_tensors(spec: &DomainSpec, n: usize) -> Result<Vec<(Tensor, usize)>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..n)
        .map(|i| {
            let class = i % CLASSES_PER_FAMILY;
            (render_sample(spec, class, &mut rng), class)
        })
        .collect())
}

/// Write `n` samples plus `labels.csv` under `out_root` and load the result
/// back (raw, unnormalized). Reproducible: the same spec always produces
/// byte-identical files.
pub fn generate_domain(spec: &DomainSpec, n: usize, out_root: &Path) -> Result<Dataset> {
    let tensors = generate_domain_tensors(spec, n)?;
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    let mut labels = String::from("filename,label\n");
    for (i, (tensor, class)) in tensors.iter().enumerate() {
        let name = format!("sample_{i:04}.xten");
        xten::write(&out_root.join(&name), tensor)?;
        labels.push_str(&format!("{name},{class}\n"));
    }
    let labels_path = out_root.join("labels.csv");
    fs::write(&labels_path, labels).map_err(|e| Error::io(&labels_path, e))?;
    Dataset::load(
        out_root,
        &LoadOptions::raw(spec.shift.len(), (spec.height, spec.width)),
    )
}

// ── PPM (binary P6) converter ──────────────────────────────────────────────

/// Decode an 8-bit binary PPM into a `3 x H x W` f32 tensor in `[0, 1]`.
pub fn ppm_to_tensor(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let fail = |msg: &str| Error::format(origin, msg.to_string());
    let mut pos = 0usize;

    let token = |pos: &mut usize| -> Result<String> {
        // Skip whitespace and `#` comments.
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::format(origin, "truncated PPM header".to_string()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    if token(&mut pos)? != "P6" {
        return Err(fail("not a binary PPM (P6) file"));
    }
    let w: usize = token(&mut pos)?.parse().map_err(|_| fail("bad width"))?;
    let h: usize = token(&mut pos)?.parse().map_err(|_| fail("bad height"))?;
    let maxval: usize = token(&mut pos)?.parse().map_err(|_| fail("bad maxval"))?;
    if maxval != 255 {
        return Err(fail("only maxval 255 is supported"));
    }
    pos += 1; // single whitespace byte after maxval
    let expected = w * h * 3;
    if bytes.len() < pos + expected {
        return Err(fail("truncated PPM payload"));
    }
    let rgb = &bytes[pos..pos + expected];
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[c * h * w + y * w + x] = rgb[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Ok(Tensor::from_f32(&[3, h, w], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64, shift: [f32; 3], contrast: f32, noise: f32) -> DomainSpec {
        DomainSpec {
            seed,
            family: PatternFamily::Stripes,
            shift: shift.to_vec(),
            contrast,
            noise,
            height: 16,
            width: 16,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(7, [0.0; 3], 1.0, 0.1);
        generate_domain(&s, 4, &dir.path().join("a")).unwrap();
        generate_domain(&s, 4, &dir.path().join("b")).unwrap();
        for i in 0..4 {
            let name = format!("sample_{i:04}.xten");
            let a = fs::read(dir.path().join("a").join(&name)).unwrap();
            let b = fs::read(dir.path().join("b").join(&name)).unwrap();
            assert_eq!(a, b, "sample {i} differs");
        }
        assert_eq!(
            fs::read(dir.path().join("a/labels.csv")).unwrap(),
            fs::read(dir.path().join("b/labels.csv")).unwrap()
        );
    }

    #[test]
    fn shifted_clone_is_base_plus_constant() {
        let base = generate_domain_tensors(&spec(3, [0.0; 3], 1.0, 0.0), 6).unwrap();
        let shifted =
            generate_domain_tensors(&spec(3, [0.5, -0.25, 1.0], 1.0, 0.0), 6).unwrap();
        for ((b, lb), (s, ls)) in base.iter().zip(&shifted) {
            assert_eq!(lb, ls);
            let bd = b.as_f32().unwrap();
            let sd = s.as_f32().unwrap();
            let hw = 16 * 16;
            for c in 0..3 {
                let expect = [0.5f32, -0.25, 1.0][c];
                for i in 0..hw {
                    let d = sd[c * hw + i] - bd[c * hw + i];
                    assert!((d - expect).abs() < 1e-6, "channel {c}: delta {d}");
                }
            }
        }
    }

    #[test]
    fn zero_samples_is_an_error() {
        assert!(matches!(
            generate_domain_tensors(&spec(1, [0.0; 3], 1.0, 0.0), 0),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn output_stats_track_shift_and_contrast() {
        let n = 32;
        let base = generate_domain_tensors(&spec(11, [0.0; 3], 1.0, 0.0), n).unwrap();
        let moved =
            generate_domain_tensors(&spec(11, [0.8, 0.8, 0.8], 2.0, 0.05), n).unwrap();
        let stats = |ts: &[(Tensor, usize)]| {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            let mut count = 0usize;
            for (t, _) in ts {
                for v in t.as_f32().unwrap() {
                    sum += *v as f64;
                    sq += (*v as f64) * (*v as f64);
                    count += 1;
                }
            }
            let mean = sum / count as f64;
            (mean, (sq / count as f64 - mean * mean).sqrt(), count)
        };
        let (mb, sb, _) = stats(&base);
        let (mm, sm, count) = stats(&moved);
        // Same seed => same patterns, so mean transforms exactly up to the
        // zero-mean noise term; 3 sigma of the noise-mean sampling error.
        let tol = 3.0 * 0.05 / (count as f64).sqrt() + 1e-4;
        assert!((mm - (2.0 * mb + 0.8)).abs() < tol, "mean off: {mm} vs {}", 2.0 * mb + 0.8);
        let expect_var = (2.0 * sb) * (2.0 * sb) + 0.05 * 0.05;
        assert!(
            (sm * sm - expect_var).abs() < 0.02 * expect_var + 1e-4,
            "variance off: {} vs {expect_var}",
            sm * sm
        );
    }

    #[test]
    fn load_passthrough_is_bit_exact_at_target_size() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(5, [0.0; 3], 1.0, 0.2);
        generate_domain(&s, 3, dir.path()).unwrap();
        let ds = Dataset::load(dir.path(), &LoadOptions::raw(3, (16, 16))).unwrap();
        for (i, name) in ds.names().iter().enumerate() {
            let raw = xten::read(&dir.path().join(name)).unwrap();
            assert_eq!(ds.sample(i), &raw, "sample {name} not bit-exact");
        }
        assert_eq!(ds.labels().unwrap(), &[0, 1, 2]);
    }

    #[test]
    fn load_resizes_to_target() {
        let dir = tempfile::tempdir().unwrap();
        generate_domain(&spec(5, [0.0; 3], 1.0, 0.0), 2, dir.path()).unwrap();
        let ds = Dataset::load(dir.path(), &LoadOptions::raw(3, (8, 8))).unwrap();
        assert_eq!(ds.sample(0).shape(), &[3, 8, 8]);
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Dataset::load(dir.path(), &LoadOptions::raw(3, (8, 8))),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        generate_domain(&spec(5, [0.0; 3], 1.0, 0.0), 2, dir.path()).unwrap();
        assert!(Dataset::load(dir.path(), &LoadOptions::raw(1, (16, 16))).is_err());
    }

    #[test]
    fn batches_cover_dataset_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_domain(&spec(5, [0.0; 3], 1.0, 0.0), 7, dir.path()).unwrap();
        let batches = ds.batches(3);
        assert_eq!(batches.len(), 3);
        assert_eq!(
            batches.iter().map(|b| b.data.shape()[0]).sum::<usize>(),
            7
        );
        assert_eq!(batches.iter().map(|b| b.start).collect::<Vec<_>>(), vec![0, 3, 6]);
        // Concatenated batches reproduce the sample order.
        let mut flat: Vec<f32> = Vec::new();
        for b in &batches {
            flat.extend_from_slice(b.data.as_f32().unwrap());
        }
        let mut expect: Vec<f32> = Vec::new();
        for i in 0..7 {
            expect.extend_from_slice(ds.sample(i).as_f32().unwrap());
        }
        assert_eq!(flat, expect);

        // One big batch when batch_size >= len.
        assert_eq!(ds.batches(100).len(), 1);
    }

    #[test]
    fn ppm_round_trip() {
        // 2x1 image: red then mid-gray.
        let ppm = b"P6\n# comment\n2 1\n255\n\xff\x00\x00\x80\x80\x80";
        let t = ppm_to_tensor(ppm, Path::new("<mem>")).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        let d = t.as_f32().unwrap();
        assert_eq!(d[0], 1.0); // R(0,0)
        assert_eq!(d[2], 0.0); // G(0,0)
        assert!((d[1] - 128.0 / 255.0).abs() < 1e-6); // R(0,1)
    }

    #[test]
    fn ppm_rejects_garbage() {
        assert!(ppm_to_tensor(b"P5\n1 1\n255\n\x00", Path::new("<mem>")).is_err());
        assert!(ppm_to_tensor(b"P6\n2 2\n255\n\x00", Path::new("<mem>")).is_err());
    }
}
