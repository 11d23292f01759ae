use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use poselift::checkpoint::{load_checkpoint, save_checkpoint, ModelMeta};
use poselift::data::{load_dataset, match_frames, resolve_robust_joints, save_dataset};
use poselift::eval::{mpjpe, Align};
use poselift::gradcheck;
use poselift::infer::{infer_dataset, load_predictions, save_predictions, InferOptions};
use poselift::pipeline::{train, TrainConfig};
use poselift::pose::Pose3D;
use poselift::ssc::RefineConfig;
use poselift::synth::{synth_generate, SynthConfig};

#[derive(Parser)]
#[command(
    name = "poselift",
    about = "2D-to-3D pose lifting with self-supervised test-time refinement",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic keypoint dataset (forward-kinematics rig +
    /// pinhole projection).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        seqs: usize,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        #[arg(long, default_value_t = 14)]
        k: usize,
        /// Gaussian pixel noise sigma on the 2D observations.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train a model through the three stages and write a checkpoint.
    Train {
        #[arg(long)]
        data3d: PathBuf,
        #[arg(long)]
        data2d: Option<PathBuf>,
        /// JSON file mirroring the training config; missing fields take
        /// their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lift a dataset to 3D poses, refining each frame unless disabled.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip the self-supervised correction and emit the plain
        /// regression.
        #[arg(long, default_value_t = false)]
        no_ssc: bool,
        #[arg(long, default_value_t = 2)]
        ssc_iters: usize,
        #[arg(long, default_value_t = 0.01)]
        ssc_step: f64,
        /// Discard threshold on robust-joint movement, millimeters.
        #[arg(long, default_value_t = 20.0)]
        tau: f64,
        /// Convergence threshold on robust-joint movement, millimeters.
        #[arg(long, default_value_t = 5.0)]
        eps: f64,
    },
    /// Compare predictions against ground truth and print MPJPE as JSON.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = AlignArg::Centroid)]
        align: AlignArg,
        /// Also dump per-frame errors as CSV (seq_id,t,error_mm).
        #[arg(long)]
        dump_csv: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite; exits nonzero on failure.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignArg {
    Centroid,
    Root,
}

fn init_thread_pool() {
    if let Ok(v) = std::env::var("POSELIFT_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("warning: ignoring invalid POSELIFT_THREADS value `{v}`"),
        }
    }
}

fn main() -> Result<()> {
    init_thread_pool();
    match Cli::parse().cmd {
        Cmd::Synth {
            out,
            seqs,
            frames,
            k,
            noise,
            seed,
        } => {
            let cfg = SynthConfig {
                seqs,
                frames,
                k,
                noise_px: noise,
                seed,
                ..SynthConfig::default()
            };
            let ds = synth_generate(&cfg).context("synthetic generation failed")?;
            save_dataset(&ds, &out).with_context(|| format!("writing {}", out.display()))?;
            println!(
                "wrote {} sequences x {} frames (k = {}, noise sigma = {} px) to {}",
                seqs,
                frames,
                k,
                noise,
                out.display()
            );
        }
        Cmd::Train {
            data3d,
            data2d,
            config,
            out,
        } => {
            let cfg: TrainConfig = match config {
                Some(path) => serde_json::from_str(
                    &fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?,
                )
                .with_context(|| format!("parsing {}", path.display()))?,
                None => TrainConfig::default(),
            };
            let ds3 = load_dataset(&data3d).with_context(|| format!("loading {}", data3d.display()))?;
            let ds2 = match &data2d {
                Some(p) => Some(load_dataset(p).with_context(|| format!("loading {}", p.display()))?),
                None => None,
            };
            report_clip_drops("3D", &ds3, cfg.clip_len);
            if let Some(d2) = &ds2 {
                report_clip_drops("2D", d2, cfg.clip_len);
            }

            let total = cfg.stage_a_steps + cfg.stage_b_steps + cfg.stage_c_steps;
            println!(
                "training: stages A/B/C = {}/{}/{} steps (batch {}, lr {}, width {}, seed {})",
                cfg.stage_a_steps,
                cfg.stage_b_steps,
                cfg.stage_c_steps,
                cfg.batch_size,
                cfg.lr,
                cfg.hidden_width,
                total
            );
            let (params, stats) = train(&ds3, ds2.as_ref(), &cfg, &mut |stage, step, loss| {
                if step == 0 || (step + 1) % 100 == 0 {
                    println!("stage {stage} step {:>6}  loss {loss:.6}", step + 1);
                    let _ = std::io::stdout().flush();
                }
            })?;
            let meta = ModelMeta {
                k: ds3.k,
                joint_names: ds3.joint_names.clone(),
                hidden_width: cfg.hidden_width,
                lstm_layers: cfg.lstm_layers,
            };
            save_checkpoint(&params, &stats, &meta, &out)
                .with_context(|| format!("writing {}", out.display()))?;
            println!("checkpoint written to {}", out.display());
        }
        Cmd::Infer {
            model,
            data,
            out,
            no_ssc,
            ssc_iters,
            ssc_step,
            tau,
            eps,
        } => {
            let ckpt = load_checkpoint(&model).with_context(|| format!("loading {}", model.display()))?;
            let ds = load_dataset(&data).with_context(|| format!("loading {}", data.display()))?;
            let (robust_joints, note) = resolve_robust_joints(&ckpt.meta.joint_names)?;
            println!("{note}");
            let opts = InferOptions {
                use_ssc: !no_ssc,
                refine: RefineConfig {
                    max_iters: ssc_iters,
                    step_size: ssc_step,
                    eps_mm: eps,
                    tau_mm: tau,
                    robust_joints,
                },
                reset_state_every_frame: false,
            };
            let preds = infer_dataset(&ckpt, &ds, &opts)?;
            save_predictions(&preds, &out).with_context(|| format!("writing {}", out.display()))?;
            let discarded = preds
                .iter()
                .filter(|p| {
                    p.ssc.as_ref().map(|r| r.verdict == poselift::ssc::Verdict::Discarded) == Some(true)
                })
                .count();
            println!(
                "inferred {} frames ({}), {} corrections discarded, wrote {}",
                preds.len(),
                if no_ssc { "ssc off" } else { "ssc on" },
                discarded,
                out.display()
            );
        }
        Cmd::Eval {
            pred,
            gt,
            align,
            dump_csv,
        } => {
            let preds = load_predictions(&pred).with_context(|| format!("loading {}", pred.display()))?;
            let gt_ds = load_dataset(&gt).with_context(|| format!("loading {}", gt.display()))?;
            let align = match align {
                AlignArg::Centroid => Align::Centroid,
                AlignArg::Root => {
                    let root = gt_ds
                        .joint_names
                        .iter()
                        .position(|n| n.eq_ignore_ascii_case("pelvis"))
                        .unwrap_or(0);
                    eprintln!("root alignment uses joint {root} ({})", gt_ds.joint_names[root]);
                    Align::Root(root)
                }
            };
            let matched = match_frames(&preds, &gt_ds)?;

            let mut per_seq: BTreeMap<&str, (Vec<Pose3D>, Vec<Pose3D>)> = BTreeMap::new();
            for (seq_id, p, g) in &matched {
                let entry = per_seq.entry(seq_id).or_default();
                entry.0.push((*p).clone());
                entry.1.push((*g).clone());
            }
            let mut per_sequence = BTreeMap::new();
            for (seq_id, (p, g)) in &per_seq {
                per_sequence.insert(seq_id.to_string(), mpjpe(p, g, align)?);
            }
            let all_p: Vec<Pose3D> = matched.iter().map(|(_, p, _)| (*p).clone()).collect();
            let all_g: Vec<Pose3D> = matched.iter().map(|(_, _, g)| (*g).clone()).collect();
            let overall = mpjpe(&all_p, &all_g, align)?;

            if let Some(csv) = dump_csv {
                let mut out = String::from("seq_id,t,error_mm\n");
                for ((seq_id, t, _), (p, g)) in preds.iter().zip(matched.iter().map(|(_, p, g)| (p, g))) {
                    let err = mpjpe(std::slice::from_ref(*p), std::slice::from_ref(*g), align)?;
                    out.push_str(&format!("{seq_id},{t},{err}\n"));
                }
                fs::write(&csv, out).with_context(|| format!("writing {}", csv.display()))?;
            }

            let report = serde_json::json!({
                "align": match align { Align::Centroid => "centroid".to_string(), Align::Root(j) => format!("root:{j}") },
                "frames": matched.len(),
                "per_sequence_mm": per_sequence,
                "overall_mm": overall,
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::Gradcheck { seed, seeds } => {
            let start = std::time::Instant::now();
            let reports = gradcheck::run_suite(seed, seeds)?;
            let mut all_ok = true;
            for r in &reports {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                println!(
                    "gradcheck {:<24} {status}  max rel err {:.3e} over {} entries ({} seeds)",
                    r.name, r.max_rel_err, r.entries, r.seeds
                );
                all_ok &= r.passed();
            }
            println!(
                "gradcheck finished in {:.2}s: {}",
                start.elapsed().as_secs_f64(),
                if all_ok { "all checks passed" } else { "FAILURES present" }
            );
            if !all_ok {
                std::process::exit(1);
            }
        }
    }
    Ok(())
}

fn report_clip_drops(label: &str, ds: &poselift::data::SequenceDataset, clip_len: usize) {
    let total: usize = ds.sequences.iter().map(|s| s.frames.len()).sum();
    let kept: usize = ds
        .sequences
        .iter()
        .map(|s| (s.frames.len() / clip_len) * clip_len)
        .sum();
    if kept < total {
        println!(
            "note: {label} data: dropping {} trailing frames that do not fill a {clip_len}-frame clip ({kept}/{total} kept)",
            total - kept
        );
    }
}
