//! Implementations of the CLI subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use pyra_core::data::synth::{generate_synthetic, nearest_centroid_accuracy, SynthSpec};
use pyra_core::data::{precompute_descriptors, split_manifest, DatasetManifest};
use pyra_core::deep::{
    evaluate, gradcheck_deep, train as train_deep, Activation, DeepModel, EncoderKind,
    StreamMode, VideoPair,
};
use pyra_core::kernel::{median_pairwise_distance, KernelKind};
use pyra_core::mkl::{em_train, KernelModel, MklParams};
use pyra_core::pyramid::Stream;
use pyra_core::simplex;
use pyra_core::svm::SvmParams;
use pyra_core::{Error, Result};

use crate::config::{KernelChoice, Mode, RunConfig, TrainOverrides};

pub fn synth(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<i32> {
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| Error::invalid(format!("{}: {e}", spec_path.display())))?;
    let mut spec: SynthSpec = serde_json::from_str(&text)
        .map_err(|e| Error::invalid(format!("{}: {e}", spec_path.display())))?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let output = generate_synthetic(&spec, out)?;
    println!(
        "wrote {} videos ({} classes) to {}",
        output.manifest.entries.len(),
        output.manifest.class_count(),
        output.manifest_path.display()
    );
    // separability sanity report on global means
    for stream in Stream::BOTH {
        let acc = nearest_centroid_accuracy(&output.manifest, stream)?;
        println!("nearest-centroid accuracy ({}): {:.3}", stream.tag(), acc);
    }
    Ok(0)
}

pub fn split(manifest_path: &Path, ratio: f64, seed: u64, out: Option<&Path>) -> Result<i32> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let (train, test) = split_manifest(&manifest, ratio, seed)?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| manifest.base_dir.clone());
    std::fs::create_dir_all(&dir)?;
    train.save(dir.join("train.json"))?;
    test.save(dir.join("test.json"))?;
    println!(
        "split {} videos into {} train / {} test",
        manifest.entries.len(),
        train.entries.len(),
        test.entries.len()
    );
    Ok(0)
}

pub fn descriptors(manifest_path: &Path, depth: usize, out: &Path) -> Result<i32> {
    let manifest = DatasetManifest::load(manifest_path)?;
    manifest.validate_files()?;
    let dm = precompute_descriptors(&manifest, depth, out)?;
    let path = out.join("descriptors.json");
    dm.save(&path)?;
    println!(
        "wrote {} descriptor pairs ({} nodes each) to {}",
        dm.entries.len(),
        dm.node_count,
        path.display()
    );
    Ok(0)
}

/// Shallow model wrapper stored on disk: the kernel machine plus the stream
/// and depth it was trained for.
#[derive(Serialize, Deserialize)]
struct ShallowModelFile {
    stream: Stream,
    depth: usize,
    model: serde_json::Value,
}

fn save_shallow(model: &KernelModel, stream: Stream, depth: usize, path: &Path) -> Result<()> {
    let wrapper = ShallowModelFile {
        stream,
        depth,
        model: serde_json::from_str(&model.to_json()?)?,
    };
    std::fs::write(path, serde_json::to_string_pretty(&wrapper)?)?;
    Ok(())
}

fn load_shallow(path: &Path) -> Result<(KernelModel, Stream, usize)> {
    let text = std::fs::read_to_string(path)?;
    let wrapper: ShallowModelFile = serde_json::from_str(&text)?;
    let model = KernelModel::from_json(&serde_json::to_string(&wrapper.model)?)?;
    Ok((model, wrapper.stream, wrapper.depth))
}

fn shallow_descriptors(
    manifest: &DatasetManifest,
    depth: usize,
    stream: Stream,
) -> Result<(Vec<Array2<f64>>, Vec<usize>)> {
    use pyra_core::pyramid::{build_partition, node_descriptors};
    let seqs = manifest.load_stream(stream)?;
    let mut descriptors = Vec::with_capacity(seqs.len());
    let mut labels = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let mt = build_partition(seq.frames(), depth)?;
        descriptors.push(node_descriptors(seq.features.view(), &mt)?);
        labels.push(seq.label);
    }
    Ok((descriptors, labels))
}

fn metrics_json(
    mean: f64,
    per_class: &[f64],
    per_stream: &std::collections::BTreeMap<String, f64>,
    fusion: Option<&[f64]>,
) -> serde_json::Value {
    let mut value = json!({
        "mean_class_accuracy": mean,
        "per_class": per_class,
        "per_stream": per_stream,
    });
    if let Some(w) = fusion {
        value["fusion_weights"] = json!(w);
    }
    value
}

fn train_shallow_cmd(config: &RunConfig, out_dir: &Path) -> Result<i32> {
    let shallow = &config.shallow;
    let manifest = DatasetManifest::load(&config.train_manifest)?;
    let (descriptors, labels) = shallow_descriptors(&manifest, shallow.depth, shallow.stream)?;
    let kind = match shallow.kernel {
        KernelChoice::Linear => KernelKind::Linear,
        KernelChoice::Gaussian { sigma } => {
            let sigma = match sigma {
                Some(s) => s,
                None => median_pairwise_distance(&descriptors)?,
            };
            if !sigma.is_finite() || sigma <= 0.0 {
                return Err(Error::invalid(format!(
                    "gaussian bandwidth must be positive, got {sigma}"
                )));
            }
            KernelKind::Gaussian { sigma }
        }
    };
    let params = MklParams {
        variant: shallow.variant,
        kind,
        svm: SvmParams {
            box_c: shallow.box_c,
            tol: shallow.svm_tol,
            max_iter: shallow.svm_max_iter,
        },
        max_iters: shallow.max_iters,
        tol: shallow.tol,
        entropy_damping: shallow.entropy_damping,
    };
    let model = em_train(&descriptors, &labels, manifest.class_count(), params)?;
    let model_path = out_dir.join("model.mkl.json");
    save_shallow(&model, shallow.stream, shallow.depth, &model_path)?;
    println!(
        "shallow model: {} rounds, converged={}, weights={:?}",
        model.iterations,
        model.converged,
        model.weights.to_vec()
    );
    println!("saved {}", model_path.display());

    if let Some(test_path) = &config.test_manifest {
        let test_manifest = DatasetManifest::load(test_path)?;
        let (test_desc, test_labels) =
            shallow_descriptors(&test_manifest, shallow.depth, shallow.stream)?;
        let acc = model.mean_class_accuracy(&test_desc, &test_labels)?;
        let mut per_stream = std::collections::BTreeMap::new();
        per_stream.insert(shallow.stream.tag().to_string(), acc);
        let metrics = metrics_json(acc, &per_class_accuracy(&model, &test_desc, &test_labels)?,
            &per_stream, None);
        let metrics_path = out_dir.join("metrics.json");
        std::fs::write(&metrics_path, serde_json::to_string_pretty(&metrics)?)?;
        println!("test mean class accuracy: {acc:.4} -> {}", metrics_path.display());
    }
    Ok(0)
}

fn per_class_accuracy(
    model: &KernelModel,
    descriptors: &[Array2<f64>],
    labels: &[usize],
) -> Result<Vec<f64>> {
    let (predicted, _) = model.predict(descriptors)?;
    let mut correct = vec![0usize; model.classes];
    let mut total = vec![0usize; model.classes];
    for (&p, &l) in predicted.iter().zip(labels.iter()) {
        total[l] += 1;
        if p == l {
            correct[l] += 1;
        }
    }
    Ok((0..model.classes)
        .map(|c| {
            if total[c] == 0 {
                f64::NAN
            } else {
                correct[c] as f64 / total[c] as f64
            }
        })
        .collect())
}

fn train_deep_cmd(config: &RunConfig, out_dir: &Path) -> Result<i32> {
    let manifest = DatasetManifest::load(&config.train_manifest)?;
    let pairs = VideoPair::from_manifest(&manifest)?;
    let outcome = train_deep(&pairs, manifest.class_count(), &config.deep)?;

    let trace_path = out_dir.join("trace.jsonl");
    let mut trace = std::io::BufWriter::new(std::fs::File::create(&trace_path)?);
    for record in &outcome.trace {
        writeln!(trace, "{}", serde_json::to_string(record)?)?;
    }
    trace.flush()?;
    let ckpt_path = out_dir.join("model.pyra");
    outcome.model.save(&ckpt_path)?;
    println!("saved {} and {}", ckpt_path.display(), trace_path.display());

    if let Some(reason) = &outcome.diverged {
        eprintln!("error: training diverged: {reason}");
        return Ok(3);
    }
    if let Some(last) = outcome.trace.last() {
        println!(
            "final epoch {}: loss {:.6}, accuracy {:?}",
            last.epoch, last.loss, last.accuracy
        );
    }

    if let Some(test_path) = &config.test_manifest {
        let test_manifest = DatasetManifest::load(test_path)?;
        let test_pairs = VideoPair::from_manifest(&test_manifest)?;
        let report = evaluate(&outcome.model, &test_pairs, config.deep.threads)?;
        let metrics = metrics_json(
            report.mean_class_accuracy,
            &report.per_class,
            &report.per_stream,
            Some(&report.fusion_weights),
        );
        let metrics_path = out_dir.join("metrics.json");
        std::fs::write(&metrics_path, serde_json::to_string_pretty(&metrics)?)?;
        println!(
            "test mean class accuracy: {:.4} -> {}",
            report.mean_class_accuracy,
            metrics_path.display()
        );
    }
    Ok(0)
}

pub fn train(config_path: &Path, overrides: TrainOverrides) -> Result<i32> {
    let mut config = RunConfig::load(config_path)?;
    config.resolve_paths(config_path);
    overrides.apply(&mut config)?;
    let out_dir = config
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;
    match config.mode {
        Mode::Deep => train_deep_cmd(&config, &out_dir),
        Mode::Shallow => train_shallow_cmd(&config, &out_dir),
    }
}

fn is_pyra_checkpoint(path: &Path) -> bool {
    std::fs::File::open(path)
        .and_then(|mut f| {
            use std::io::Read;
            let mut magic = [0u8; 4];
            f.read_exact(&mut magic)?;
            Ok(magic == *b"PYRA")
        })
        .unwrap_or(false)
}

pub fn eval(checkpoint: &Path, manifest_path: &Path, out: Option<&Path>, threads: usize) -> Result<i32> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let metrics = if is_pyra_checkpoint(checkpoint) {
        let model = DeepModel::load(checkpoint)?;
        let pairs = VideoPair::from_manifest(&manifest)?;
        let report = evaluate(&model, &pairs, threads)?;
        println!("mean class accuracy: {:.4}", report.mean_class_accuracy);
        metrics_json(
            report.mean_class_accuracy,
            &report.per_class,
            &report.per_stream,
            Some(&report.fusion_weights),
        )
    } else {
        let (model, stream, depth) = load_shallow(checkpoint)?;
        let (descriptors, labels) = shallow_descriptors(&manifest, depth, stream)?;
        let acc = model.mean_class_accuracy(&descriptors, &labels)?;
        println!("mean class accuracy: {acc:.4}");
        let mut per_stream = std::collections::BTreeMap::new();
        per_stream.insert(stream.tag().to_string(), acc);
        metrics_json(acc, &per_class_accuracy(&model, &descriptors, &labels)?, &per_stream, None)
    };
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.with_file_name("metrics.json"));
    std::fs::write(&out_path, serde_json::to_string_pretty(&metrics)?)?;
    println!("wrote {}", out_path.display());
    Ok(0)
}

/// Node index -> (level, position), both 1-based, breadth-first layout.
fn node_address(flat: usize) -> (usize, usize) {
    let level = usize::BITS as usize - (flat + 1).leading_zeros() as usize;
    let pos = flat + 2 - (1usize << (level - 1));
    (level, pos)
}

fn write_beta_csv(path: &Path, weights: &[f64]) -> Result<()> {
    let mut out = String::from("level,position,beta\n");
    for (flat, w) in weights.iter().enumerate() {
        let (level, pos) = node_address(flat);
        out.push_str(&format!("{level},{pos},{w}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn report(checkpoint: &Path, out: &Path) -> Result<i32> {
    std::fs::create_dir_all(out)?;
    if is_pyra_checkpoint(checkpoint) {
        let model = DeepModel::load(checkpoint)?;
        for stream in Stream::BOTH {
            let sm = model.stream(stream);
            for p in 0..model.config.pyramids {
                let weights = sm.pyramid_weights(p);
                let path = out.join(format!("beta_{}_p{p}.csv", stream.tag()));
                write_beta_csv(&path, weights.as_slice().unwrap())?;
            }
        }
        let fusion = model.fusion_weights();
        let fusion_path = out.join("fusion.json");
        std::fs::write(
            &fusion_path,
            serde_json::to_string_pretty(&json!({ "fusion_weights": fusion.to_vec() }))?,
        )?;
        println!(
            "fusion weights (motion, appearance): ({:.4}, {:.4})",
            fusion[0], fusion[1]
        );
        println!("wrote weight reports to {}", out.display());
    } else {
        let (model, stream, _) = load_shallow(checkpoint)?;
        let path = out.join(format!("beta_{}_p0.csv", stream.tag()));
        write_beta_csv(&path, model.weights.as_slice().unwrap())?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

/// The tiny reference model for the gradient suite: two streams, depth 3,
/// one pyramid, lengths 1/5/7.
pub fn gradcheck(seed: u64, out: Option<&Path>) -> Result<i32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for (i, frames) in [1usize, 5, 7].into_iter().enumerate() {
        let gen = |rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((frames, 4), |_| rng.random_range(-1.0f64..1.0))
        };
        pairs.push(VideoPair {
            video_id: format!("g{i}"),
            label: i % 2,
            motion: gen(&mut rng),
            appearance: gen(&mut rng),
        });
    }
    let config = pyra_core::deep::ModelConfig {
        classes: 2,
        depth: 3,
        pyramids: 1,
        variant: pyra_core::deep::AggVariant::Concat,
        encoder: EncoderKind::TwoLayer {
            activation: Activation::Tanh,
        },
        d_in_motion: 4,
        d_in_appearance: 4,
        d_enc: 5,
        node_dim: 3,
        reduce_target: 8,
        stream_mode: StreamMode::Joint,
    };
    let model = DeepModel::init(&config, seed.wrapping_add(1))?;
    let refs: Vec<&VideoPair> = pairs.iter().collect();
    let reports = gradcheck_deep(&model, &refs, None, 1e-3, 1e-5)?;
    let model_tol = 1e-4;

    // simplex Jacobian against central differences
    let free = ndarray::Array1::from_shape_fn(7, |_| rng.random_range(-2.0f64..2.0));
    let weights = simplex::normalize(free.view())?;
    let jac = simplex::jacobian(weights.view());
    let mut jac_err = 0f64;
    let eps = 1e-6;
    for j in 0..free.len() {
        let mut plus = free.clone();
        plus[j] += eps;
        let mut minus = free.clone();
        minus[j] -= eps;
        let wp = simplex::normalize(plus.view())?;
        let wm = simplex::normalize(minus.view())?;
        for p in 0..free.len() {
            let numeric = (wp[p] - wm[p]) / (2.0 * eps);
            jac_err = jac_err.max(pyra_core::gradcheck::rel_error(jac[[p, j]], numeric));
        }
    }
    let jac_tol = 1e-6;

    let mut pass = jac_err <= jac_tol;
    for r in &reports {
        let ok = r.max_rel_error <= model_tol;
        pass &= ok;
        println!(
            "{} {:<32} max_rel_error {:.3e}",
            if ok { "pass" } else { "FAIL" },
            r.block,
            r.max_rel_error
        );
    }
    println!(
        "{} {:<32} max_rel_error {:.3e}",
        if jac_err <= jac_tol { "pass" } else { "FAIL" },
        "simplex.jacobian",
        jac_err
    );

    let payload = json!({
        "blocks": reports,
        "simplex_jacobian_max_rel_error": jac_err,
        "pass": pass,
    });
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_string_pretty(&payload)?)?;
        println!("wrote {}", path.display());
    }
    if pass {
        Ok(0)
    } else {
        Err(Error::numerical("gradient checks failed"))
    }
}
