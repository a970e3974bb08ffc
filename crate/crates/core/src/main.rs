use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use atomlens::atoms::{self, AtomLabel, AtomProfile};
use atomlens::data::{self, filter_non_cue, EmbeddingSet, SparseCodes};
use atomlens::head::HeadWeights;
use atomlens::ksvd::{self, KsvdConfig};
use atomlens::ooms::{self, OomsDataset, OomsFitConfig, OomsModel, Split};
use atomlens::pursuit;
use atomlens::rng::derive_seed;
use atomlens::synth::{self, SynthConfig};
use atomlens::{Error, Result};

/// Sparse atom decomposition of patch embeddings.
#[derive(Parser)]
#[command(name = "atomlens", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Output directory (created if missing).
    #[arg(long)]
    output: PathBuf,
    /// Global seed; every stage derives its own from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker thread cap (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted ground truth.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_images: usize,
        #[arg(long, default_value_t = 64)]
        n_dims: usize,
        #[arg(long, default_value_t = 8)]
        grid: usize,
        #[arg(long, default_value_t = 0.01)]
        noise_sigma: f64,
    },
    /// Fit a dictionary with batched K-SVD on the non-cue patches.
    KsvdFit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 512)]
        n_dicts: usize,
        #[arg(long, default_value_t = 8)]
        n_nnz: usize,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 8192)]
        batch_size: usize,
        /// Restrict the pool to each image's top-k patches under this head.
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        top_k: usize,
    },
    /// Sparse-code every item of an embedding set.
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        dict: PathBuf,
        #[arg(long, default_value_t = 8)]
        n_nnz: usize,
    },
    /// Activation rates, CV and the content/style split.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        dict: PathBuf,
        #[arg(long, default_value_t = 8)]
        n_nnz: usize,
    },
    /// Head reliance scores and the content fraction.
    Reliance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        dict: PathBuf,
        #[arg(long)]
        head: PathBuf,
        /// Profiles written by `analyze`.
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long, default_value_t = 8)]
        n_nnz: usize,
    },
    /// Fit one sign-constrained OOMS detector.
    OomsFit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        features: FeatureArgs,
        #[arg(long = "lambda")]
        lambda: f64,
    },
    /// Sweep λ and report AUROC, selected atoms and their content fraction.
    OomsEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        features: FeatureArgs,
        /// Comma-separated λ values.
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        /// Profiles written by `analyze`, for the content fraction column.
        #[arg(long)]
        profiles: Option<PathBuf>,
        /// Also score this fitted model on the eval split.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Top-activating patches per atom as JSON lines.
    VizManifest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        dict: PathBuf,
        #[arg(long, default_value_t = 8)]
        n_nnz: usize,
        #[arg(long, default_value_t = atoms::DEFAULT_N_VIZ)]
        n_viz: usize,
        /// Comma-separated atom ids (default: every atom).
        #[arg(long, value_delimiter = ',')]
        atoms: Vec<usize>,
    },
}

#[derive(Args, Clone)]
struct FeatureArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    head: PathBuf,
    #[arg(long, default_value_t = 8)]
    n_nnz: usize,
    /// Seed of the stratified 70/30 split (default: derived from --seed).
    #[arg(long)]
    split_seed: Option<u64>,
}

/// Accumulates the run report while a command executes.
struct Run {
    name: &'static str,
    output: PathBuf,
    seed: u64,
    config: Value,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    timings_ms: BTreeMap<String, f64>,
    started: Instant,
}

#[derive(Serialize)]
struct Report<'a> {
    command: &'a str,
    version: &'a str,
    status: &'a str,
    error: Option<String>,
    seed: u64,
    config: &'a Value,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
    timings_ms: &'a BTreeMap<String, f64>,
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

impl Run {
    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    fn out(&self, name: &str) -> PathBuf {
        self.output.join(name)
    }

    fn wrote(&mut self, name: &str) -> Result<()> {
        let h = sha256_file(&self.out(name))?;
        self.outputs.insert(name.to_string(), h);
        Ok(())
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let v = f()?;
        self.timings_ms
            .insert(stage.to_string(), t.elapsed().as_secs_f64() * 1e3);
        Ok(v)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        fs::write(self.out(name), serde_json::to_vec_pretty(value)?)?;
        self.wrote(name)
    }

    fn finish(mut self, result: &Result<()>) -> std::io::Result<()> {
        self.timings_ms
            .insert("total".into(), self.started.elapsed().as_secs_f64() * 1e3);
        let report = Report {
            command: self.name,
            version: env!("CARGO_PKG_VERSION"),
            status: if result.is_ok() { "ok" } else { "error" },
            error: result.as_ref().err().map(|e| e.to_string()),
            seed: self.seed,
            config: &self.config,
            inputs: &self.inputs,
            outputs: &self.outputs,
            timings_ms: &self.timings_ms,
        };
        fs::create_dir_all(&self.output)?;
        let path = self.output.join(format!("{}.report.json", self.name));
        fs::write(path, serde_json::to_vec_pretty(&report).map_err(std::io::Error::other)?)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common, config) = describe(&cli.command);
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let mut run = Run {
        name,
        output: common.output.clone(),
        seed: common.seed,
        config,
        inputs: BTreeMap::new(),
        outputs: BTreeMap::new(),
        timings_ms: BTreeMap::new(),
        started: Instant::now(),
    };
    let result = fs::create_dir_all(&run.output)
        .map_err(Error::from)
        .and_then(|_| execute(&cli.command, &mut run));
    if let Err(e) = run.finish(&result) {
        eprintln!("error: could not write run report: {e}");
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn describe(cmd: &Command) -> (&'static str, &Common, Value) {
    match cmd {
        Command::Synth {
            common,
            n_images,
            n_dims,
            grid,
            noise_sigma,
        } => (
            "synth",
            common,
            json!({"n_images": n_images, "n_dims": n_dims, "grid": grid, "noise_sigma": noise_sigma}),
        ),
        Command::KsvdFit {
            common,
            n_dicts,
            n_nnz,
            epochs,
            batch_size,
            head,
            top_k,
            ..
        } => (
            "ksvd-fit",
            common,
            json!({"n_dicts": n_dicts, "n_nnz": n_nnz, "epochs": epochs, "batch_size": batch_size,
                   "importance_sampling": head.is_some(), "top_k": top_k}),
        ),
        Command::Encode { common, n_nnz, .. } => ("encode", common, json!({"n_nnz": n_nnz})),
        Command::Analyze { common, n_nnz, .. } => ("analyze", common, json!({"n_nnz": n_nnz})),
        Command::Reliance { common, n_nnz, .. } => ("reliance", common, json!({"n_nnz": n_nnz})),
        Command::OomsFit {
            common,
            features,
            lambda,
        } => (
            "ooms-fit",
            common,
            json!({"n_nnz": features.n_nnz, "lambda": lambda, "split_seed": features.split_seed,
                   "train_fraction": ooms::TRAIN_FRACTION}),
        ),
        Command::OomsEval {
            common,
            features,
            lambdas,
            ..
        } => (
            "ooms-eval",
            common,
            json!({"n_nnz": features.n_nnz, "lambdas": lambdas, "split_seed": features.split_seed,
                   "train_fraction": ooms::TRAIN_FRACTION}),
        ),
        Command::VizManifest {
            common,
            n_nnz,
            n_viz,
            atoms,
            ..
        } => (
            "viz-manifest",
            common,
            json!({"n_nnz": n_nnz, "n_viz": n_viz, "atoms": atoms}),
        ),
    }
}

fn execute(cmd: &Command, run: &mut Run) -> Result<()> {
    match cmd {
        Command::Synth {
            common,
            n_images,
            n_dims,
            grid,
            noise_sigma,
        } => {
            let defaults = SynthConfig::default();
            let cfg = SynthConfig {
                n_images: *n_images,
                n_dims: *n_dims,
                grid: *grid,
                noise_sigma: *noise_sigma,
                seed: derive_seed(common.seed, "synth"),
                ..defaults
            };
            let corpus = run.time("generate", || synth::generate_corpus(&cfg))?;
            data::write_embeddings(&corpus.set, &run.out("embeddings.embz"))?;
            run.wrote("embeddings.embz")?;
            corpus.truth.save(&run.out("truth.json"))?;
            run.wrote("truth.json")?;
            data::write_dictionary(&corpus.dictionary, &run.out("planted_dictionary.embz"))?;
            run.wrote("planted_dictionary.embz")?;
            corpus.truth.head_weights()?.save(&run.out("head.embz"))?;
            run.wrote("head.embz")?;
            run.wrote("head.embz.json")
        }
        Command::KsvdFit {
            common,
            input,
            n_dicts,
            n_nnz,
            epochs,
            batch_size,
            head,
            top_k,
        } => {
            run.input(input)?;
            let set = data::read_embeddings(input)?;
            let pool = match head {
                Some(h) => {
                    run.input(h)?;
                    let weights = HeadWeights::load(h)?;
                    let sampled = run.time("importance_sample", || {
                        ksvd::importance_sample_pool(&set, &weights, *top_k)
                    })?;
                    run.config["short_images"] = json!(sampled.short_images.len());
                    sampled.pool
                }
                None => filter_non_cue(&set),
            };
            let cfg = KsvdConfig {
                n_dicts: *n_dicts,
                n_nnz: *n_nnz,
                epochs: *epochs,
                batch_size: *batch_size,
                seed: derive_seed(common.seed, "ksvd"),
                ..Default::default()
            };
            run.config["ksvd"] = serde_json::to_value(cfg)?;
            let (dict, report) = run.time("fit", || ksvd::ksvd_fit(&pool, &cfg))?;
            data::write_dictionary(&dict, &run.out("dictionary.embz"))?;
            run.wrote("dictionary.embz")?;
            run.write_json("fit_report.json", &report)
        }
        Command::Encode { input, dict, n_nnz, .. } => {
            let (set, dict) = load_set_and_dict(run, input, dict)?;
            let codes = run.time("encode", || pursuit::encode_all(&set, &dict, *n_nnz))?;
            data::write_codes(&codes, &run.out("codes.jsonl"))?;
            run.wrote("codes.jsonl")
        }
        Command::Analyze {
            input,
            codes,
            dict,
            n_nnz,
            ..
        } => {
            let (set, dict) = load_set_and_dict(run, input, dict)?;
            let (meta, codes) = non_cue_codes(run, &set, codes, *n_nnz)?;
            let rates = atoms::activation_rates(&codes, &meta, dict.n_dicts())?;
            let cvs = atoms::coefficient_of_variation(&rates)?;
            let split = atoms::split_content_style(&cvs)?;
            let profiles = atoms::build_profiles(&rates, &cvs, &split, None);
            write_profiles(run, &profiles)?;
            let count = |l: AtomLabel| split.labels.iter().filter(|&&x| x == l).count();
            run.write_json(
                "analysis.json",
                &json!({
                    "subsets": rates.subsets,
                    "subset_sizes": rates.subset_sizes,
                    "median_cv": split.median,
                    "degenerate_split": split.degenerate,
                    "n_contentful": count(AtomLabel::Contentful),
                    "n_stylistic": count(AtomLabel::Stylistic),
                    "n_inactive": count(AtomLabel::Inactive),
                }),
            )
        }
        Command::Reliance {
            input,
            codes,
            dict,
            head,
            profiles,
            n_nnz,
            ..
        } => {
            let (set, dict) = load_set_and_dict(run, input, dict)?;
            run.input(head)?;
            let weights = HeadWeights::load(head)?;
            let mut profiles = load_profiles(run, profiles, dict.n_dicts())?;
            let (_, codes) = non_cue_codes(run, &set, codes, *n_nnz)?;
            let rel = atoms::reliance_scores(&dict, &weights, &codes)?;
            let labels: Vec<AtomLabel> = profiles.iter().map(|p| p.label).collect();
            let scores: Vec<f64> = rel.iter().map(|r| r.score).collect();
            let fraction = atoms::content_fraction(&scores, &labels)?;
            for (p, r) in profiles.iter_mut().zip(&rel) {
                p.reliance_score = r.score;
                p.head_alignment = r.head_alignment;
                p.mean_abs_coeff = r.mean_abs_coeff;
            }
            write_profiles(run, &profiles)?;
            run.write_json(
                "reliance.json",
                &json!({"content_fraction": fraction, "style_fraction": 1.0 - fraction, "atoms": rel}),
            )
        }
        Command::OomsFit {
            common,
            features,
            lambda,
        } => {
            let data = load_features(run, features, common.seed)?;
            let cfg = OomsFitConfig {
                seed: split_seed(features, common.seed),
                ..Default::default()
            };
            let train = data.subset(&data.indices(Split::Train));
            let (model, diag) = run.time("fit", || ooms::fit_ooms(&train, *lambda, &cfg))?;
            let eval_auroc = ooms::evaluate(&model, &data).ok();
            model.save(&run.out("ooms_model.json"))?;
            run.wrote("ooms_model.json")?;
            run.write_json(
                "ooms_fit.json",
                &json!({"diagnostics": diag, "selected": model.selected(), "eval_auroc": eval_auroc,
                        "n_train": train.len(), "n_eval": data.len() - train.len()}),
            )
        }
        Command::OomsEval {
            common,
            features,
            lambdas,
            profiles,
            model,
        } => {
            let data = load_features(run, features, common.seed)?;
            let labels = match profiles {
                Some(p) => Some(
                    load_profiles(run, p, data.n_dicts)?
                        .iter()
                        .map(|p| p.label)
                        .collect::<Vec<_>>(),
                ),
                None => None,
            };
            let cfg = OomsFitConfig {
                seed: split_seed(features, common.seed),
                ..Default::default()
            };
            let points = run.time("sweep", || ooms::lambda_sweep(&data, lambdas, labels.as_deref(), &cfg))?;
            ooms::write_sweep_csv(&points, &run.out("sweep.csv"))?;
            run.wrote("sweep.csv")?;
            if let Some(m) = model {
                run.input(m)?;
                let fitted = OomsModel::load(m)?;
                if fitted.weights.len() != data.n_dicts {
                    return Err(Error::DimMismatch {
                        expected: data.n_dicts,
                        got: fitted.weights.len(),
                    });
                }
                let auroc = ooms::evaluate(&fitted, &data)?;
                run.write_json(
                    "ooms_eval.json",
                    &json!({"lambda": fitted.lambda, "eval_auroc": auroc, "n_selected": fitted.selected().len()}),
                )?;
            }
            Ok(())
        }
        Command::VizManifest {
            input,
            codes,
            dict,
            n_nnz,
            n_viz,
            atoms: ids,
            ..
        } => {
            let (set, dict) = load_set_and_dict(run, input, dict)?;
            let (meta, codes) = non_cue_codes(run, &set, codes, *n_nnz)?;
            let ids: Vec<usize> = if ids.is_empty() {
                (0..dict.n_dicts()).collect()
            } else {
                ids.clone()
            };
            let manifest = atoms::top_activating_manifest(&codes, &meta, &ids, *n_viz, dict.n_dicts())?;
            run.config["short_atoms"] = json!(manifest.short_atoms);
            atoms::write_manifest(&manifest, &run.out("manifest.jsonl"))?;
            run.wrote("manifest.jsonl")
        }
    }
}

fn load_set_and_dict(run: &mut Run, input: &Path, dict: &Path) -> Result<(EmbeddingSet, data::Dictionary)> {
    run.input(input)?;
    run.input(dict)?;
    let set = data::read_embeddings(input)?;
    let dict = data::read_dictionary(dict)?;
    if set.n_dims() != dict.n_dims() {
        return Err(Error::DimMismatch {
            expected: dict.n_dims(),
            got: set.n_dims(),
        });
    }
    Ok((set, dict))
}

/// Codes of the non-cue items, with their metadata; `codes` must cover every input item.
fn non_cue_codes(
    run: &mut Run,
    set: &EmbeddingSet,
    codes: &Path,
    n_nnz: usize,
) -> Result<(Vec<data::ItemMeta>, SparseCodes)> {
    run.input(codes)?;
    let all = data::read_codes(codes, n_nnz)?;
    if all.len() != set.n_items() {
        return Err(Error::SizeMismatch(format!(
            "{} codes for {} embeddings",
            all.len(),
            set.n_items()
        )));
    }
    let keep: Vec<usize> = (0..set.n_items()).filter(|&i| !set.meta()[i].is_cue).collect();
    Ok((keep.iter().map(|&i| set.meta()[i].clone()).collect(), all.select(&keep)))
}

fn load_profiles(run: &mut Run, path: &Path, n_dicts: usize) -> Result<Vec<AtomProfile>> {
    run.input(path)?;
    let profiles = atoms::read_profiles_json(path)?;
    if profiles.len() != n_dicts {
        return Err(Error::DimMismatch {
            expected: n_dicts,
            got: profiles.len(),
        });
    }
    Ok(profiles)
}

fn write_profiles(run: &mut Run, profiles: &[AtomProfile]) -> Result<()> {
    atoms::write_profiles_json(profiles, &run.out("atom_profiles.json"))?;
    run.wrote("atom_profiles.json")?;
    atoms::write_profiles_csv(profiles, &run.out("atom_profiles.csv"))?;
    run.wrote("atom_profiles.csv")
}

fn split_seed(features: &FeatureArgs, seed: u64) -> u64 {
    features.split_seed.unwrap_or_else(|| derive_seed(seed, "ooms/split"))
}

fn load_features(run: &mut Run, args: &FeatureArgs, seed: u64) -> Result<OomsDataset> {
    let (set, dict) = load_set_and_dict(run, &args.input, &args.dict)?;
    run.input(&args.head)?;
    let weights = HeadWeights::load(&args.head)?;
    let features = run.time("features", || ooms::image_features(&set, &weights, &dict, args.n_nnz))?;
    let data = OomsDataset::from_features(&features, dict.n_dicts())?.with_stratified_split(split_seed(args, seed));
    Ok(data)
}
