use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::ValueEnum;
use phasecollapse::filterbank::{build_bank, build_morlet, spectral_stats, BlockLayer, MorletParams};
use phasecollapse::io::{
    cifar10_files, data_root, load_cifar10, load_mnist, mnist_files, read_pgm, synthetic_textures, write_pgm,
    CsvLog, DatasetBatch, Tensor, TensorContainer,
};
use phasecollapse::learn::{self, parse_run_config, Model, TrainOptions};
use phasecollapse::network::{NetworkConfig, NetworkState};
use phasecollapse::tensor_ops::{conv2d_direct, conv2d_fft, ComplexFeatureMap, RealImage};
use phasecollapse::theory::{run_checks, Check, TheoremReport};
use phasecollapse::{rng, Complex64, Error};
use rand::Rng as _;

use crate::{BenchArgs, GenFiltersArgs, ScatterArgs, TrainArgs, VerifyArgs};

/// Classes of the synthetic texture dataset.
const TEXTURE_CLASSES: usize = 4;
/// Synthetic texture images per split when no count is given.
const TEXTURE_DEFAULT_COUNT: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] Error),
    #[error("{failed} of {total} checks failed")]
    VerificationFailed { failed: usize, total: usize },
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl CliError {
    /// 1 for failed checks and diverged training, 2 for usage, input and format errors.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::VerificationFailed { .. } | CliError::Lib(Error::Divergence { .. }) => 1,
            CliError::Usage(_) | CliError::Lib(_) => 2,
        }
    }
}

type CliResult = Result<(), CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetName {
    Mnist,
    Cifar10,
    /// Oriented stripe textures generated from the seed.
    Textures,
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

/// Network keys of a run configuration; optimizer keys are accepted and ignored.
fn load_network_config(path: Option<&Path>) -> Result<NetworkConfig, CliError> {
    match path {
        Some(p) => Ok(parse_run_config(&read_text(p)?)?.0),
        None => Ok(NetworkConfig::desk()),
    }
}

fn dataset_root(data: Option<&Path>) -> Result<PathBuf, CliError> {
    data_root(data).ok_or_else(|| {
        CliError::Usage(format!("no dataset root: pass --data or set {}", phasecollapse::io::DATA_ENV))
    })
}

fn load_dataset(
    name: DatasetName,
    data: Option<&Path>,
    test: bool,
    count: Option<usize>,
    texture_size: usize,
    seed: u64,
) -> Result<DatasetBatch, CliError> {
    let full = match name {
        DatasetName::Mnist => {
            let f = mnist_files(&dataset_root(data)?);
            if test {
                load_mnist(&f[2], &f[3])?
            } else {
                load_mnist(&f[0], &f[1])?
            }
        }
        DatasetName::Cifar10 => {
            let (train, test_batch) = cifar10_files(&dataset_root(data)?);
            if test {
                load_cifar10(&[test_batch])?
            } else {
                load_cifar10(&train)?
            }
        }
        DatasetName::Textures => {
            let stream = if test { seed.wrapping_add(1) } else { seed };
            let n = count.unwrap_or(TEXTURE_DEFAULT_COUNT);
            synthetic_textures(n, 3, texture_size, TEXTURE_CLASSES, stream)?
        }
    };
    Ok(match count {
        Some(n) => full.head(n),
        None => full,
    })
}

pub fn gen_filters(args: &GenFiltersArgs) -> CliResult {
    std::fs::create_dir_all(&args.out)?;
    let first = build_bank(args.angles, BlockLayer::First, args.grid)?;
    let second = build_bank(args.angles, BlockLayer::Second, args.grid)?;
    let mut labelled = vec![("lowpass".to_string(), first.low_pass().clone())];
    for (tag, bank) in [("first", &first), ("second", &second)] {
        for (l, f) in bank.band_pass().iter().enumerate() {
            labelled.push((format!("{tag}{}", l + 1), f.clone()));
        }
    }
    let mut container = TensorContainer::new();
    let mut notes = vec![format!("angles = {}", args.angles), format!("grid = {}", args.grid)];
    for (label, f) in &labelled {
        let re: Vec<f64> = f.taps().iter().map(|z| z.re).collect();
        let im: Vec<f64> = f.taps().iter().map(|z| z.im).collect();
        write_pgm(&args.out.join(format!("{label}_re.pgm")), f.size(), f.size(), &re)?;
        write_pgm(&args.out.join(format!("{label}_im.pgm")), f.size(), f.size(), &im)?;
        container.push(Tensor::complex(label.clone(), vec![f.size(), f.size()], f.taps().to_vec())?)?;
        let s = spectral_stats(f)?;
        notes.push(format!(
            "{label}: xi = ({:.4}, {:.4}) sigma = {:.4}",
            s.center_freq[0], s.center_freq[1], s.bandwidth
        ));
    }
    let manifest = container.save_with_manifest(&args.out.join("filters.pct"), &notes)?;
    println!("wrote {} filters to {} ({})", labelled.len(), args.out.display(), manifest.display());
    Ok(())
}

/// A PGM image or the `image` tensor of a container.
fn read_image(path: &Path) -> Result<RealImage, CliError> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        let pgm = read_pgm(path)?;
        let data = pgm.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        return Ok(RealImage::new(1, pgm.height, pgm.width, data)?);
    }
    let c = TensorContainer::load(path)?;
    let t = c.require("image")?;
    match t.dims.as_slice() {
        &[ch, h, w] => Ok(RealImage::new(ch, h, w, t.as_real()?.to_vec())?),
        dims => Err(CliError::Usage(format!("image tensor has dims {dims:?}, expected [c, h, w]"))),
    }
}

pub fn scatter(args: &ScatterArgs, data: Option<&Path>) -> CliResult {
    let mut config = load_network_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let (images, labels) = match (&args.input, args.dataset) {
        (Some(p), _) => (vec![read_image(p)?], None),
        (None, Some(name)) => {
            let set = load_dataset(name, data, args.test_split, Some(args.count), 32, config.seed)?;
            (set.images, Some(set.labels))
        }
        (None, None) => return Err(CliError::Usage("pass --input or --dataset".into())),
    };
    let first = images.first().ok_or_else(|| CliError::Usage("no images to scatter".into()))?;
    let shape = (first.channels(), first.height(), first.width());
    let mut net = NetworkState::new(config.clone(), shape)?;
    if let Some(ck) = &args.checkpoint {
        net.load_tensors(&TensorContainer::load(ck)?)?;
    }
    let xs: Vec<ComplexFeatureMap> = images.iter().map(ComplexFeatureMap::from_real).collect();
    let features = net.forward_eval_batch(&xs)?;

    let mut container = TensorContainer::new();
    if features.len() == 1 && labels.is_none() {
        container.push(Tensor::from_map("features", &features[0]))?;
    } else {
        for (i, f) in features.iter().enumerate() {
            container.push(Tensor::from_map(format!("features.{i}"), f))?;
        }
    }
    if let Some(labels) = labels {
        let values = labels.iter().map(|&l| l as f64).collect();
        container.push(Tensor::real("labels", vec![labels.len()], values)?)?;
    }
    let notes: Vec<String> = config.to_text().lines().map(String::from).collect();
    container.save_with_manifest(&args.out, &notes)?;
    let (c, h, w) = net.output_shape();
    println!("wrote {} feature maps of shape {c}x{h}x{w} to {}", features.len(), args.out.display());
    Ok(())
}

pub fn train(args: &TrainArgs, data: Option<&Path>) -> CliResult {
    let (mut config, sgd) = parse_run_config(&read_text(&args.config)?)?;
    let seed = args.seed.unwrap_or(config.seed);
    config.seed = seed;
    let train_set = load_dataset(args.dataset, data, false, args.train_count, args.texture_size, seed)?;
    let test_set = load_dataset(args.dataset, data, true, args.test_count, args.texture_size, seed)?;
    let shape = train_set
        .image_shape()
        .ok_or_else(|| CliError::Usage("the training set is empty".into()))?;
    let mut model = Model::new(config, shape, train_set.classes)?;
    std::fs::create_dir_all(&args.out)?;
    let options = TrainOptions {
        checkpoint_dir: Some(args.out.join("checkpoints")),
        checkpoint_period: args.checkpoint_period,
        csv: Some(args.out.join("metrics.csv")),
        seed,
        verbose: !args.quiet,
    };
    let report = learn::train(&mut model, &train_set, Some(&test_set), &sgd, &options)?;
    let mut notes: Vec<String> = sgd.to_text().lines().map(String::from).collect();
    notes.push(format!("train_seed = {seed}"));
    model.save(&args.out.join("model.pct"), &notes)?;
    match report.final_test() {
        Some(e) => println!(
            "final test error: top-1 {:.2}%{}",
            e.top1,
            e.top5.map(|t| format!(", top-5 {t:.2}%")).unwrap_or_default()
        ),
        None => println!("trained for 0 epochs"),
    }
    Ok(())
}

pub fn verify(args: &VerifyArgs) -> CliResult {
    let flags = [
        (args.thm1, Check::Translation),
        (args.eq3, Check::ModulusRelu),
        (args.prox, Check::Prox),
        (args.thm2, Check::Entropy),
        (args.thm3, Check::Sparsification),
    ];
    let mut checks: Vec<Check> = flags.iter().filter(|(on, _)| *on).map(|(_, c)| *c).collect();
    if args.all || checks.is_empty() {
        checks = Check::ALL.to_vec();
    }
    let start = Instant::now();
    let reports = run_checks(&checks, args.seed, args.trials)?;
    for r in &reports {
        println!("{r}");
    }
    if let Some(path) = &args.csv {
        let mut log = CsvLog::open(path, &TheoremReport::CSV_HEADER)?;
        for r in &reports {
            log.append(&r.csv_fields())?;
        }
    }
    eprintln!("{} checks in {:.1}s", reports.len(), start.elapsed().as_secs_f64());
    let failed = reports.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(CliError::VerificationFailed { failed, total: reports.len() });
    }
    Ok(())
}

fn mean_seconds(repeats: usize, mut f: impl FnMut() -> Result<(), Error>) -> Result<f64, Error> {
    let start = Instant::now();
    for _ in 0..repeats {
        f()?;
    }
    Ok(start.elapsed().as_secs_f64() / repeats as f64)
}

pub fn bench(args: &BenchArgs) -> CliResult {
    if args.repeats == 0 {
        return Err(CliError::Usage("--repeats must be positive".into()));
    }
    let mut log = CsvLog::open(&args.out, &["kind", "size", "grid", "seconds"])?;
    let mut rng = rng::stream(args.seed, "bench", 0);
    let filter = build_morlet(MorletParams::first_layer(0.0), args.grid)?;
    for &size in &args.sizes {
        let x = ComplexFeatureMap::from_fn(1, size, size, |_, _, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let direct = mean_seconds(args.repeats, || conv2d_direct(&x, &filter).map(drop))?;
        let fft = mean_seconds(args.repeats, || conv2d_fft(&x, &filter).map(drop))?;
        for (kind, secs) in [("conv_direct", direct), ("conv_fft", fft)] {
            println!("{kind:<12} {size:>4}x{size:<4} grid {:>3}  {secs:.3e} s", args.grid);
            log.append(&[kind.into(), size.to_string(), args.grid.to_string(), format!("{secs:e}")])?;
        }
    }
    let config = load_network_config(args.config.as_deref())?;
    let grid = config.grid;
    let net = NetworkState::new(config, (3, 32, 32))?;
    let batch: Vec<ComplexFeatureMap> = (0..args.batch)
        .map(|_| ComplexFeatureMap::from_fn(3, 32, 32, |_, _, _| Complex64::new(rng.random_range(0.0..1.0), 0.0)))
        .collect();
    let secs = mean_seconds(args.repeats, || net.forward_eval_batch(&batch).map(drop))? / args.batch.max(1) as f64;
    println!("{:<12} {:>4}x{:<4} grid {grid:>3}  {secs:.3e} s per image", "forward", 32, 32);
    log.append(&["forward".into(), "32".into(), grid.to_string(), format!("{secs:e}")])?;
    Ok(())
}
