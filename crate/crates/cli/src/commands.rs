use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use locdiff::bench::{bench_decode, bench_encode, bench_kl, bench_sample, BenchRow};
use locdiff::checkpoint::{load_checkpoint, load_meta, save_checkpoint};
use locdiff::data::{
    build_lookup, build_lookup_cached, conditions_matrix, gen_cities, gen_embedded_loc,
    load_dataset, points, save_dataset, split, CitiesConfig, Projection, Split,
};
use locdiff::diffusion::{
    decode_ensembles, sample_latents, train, write_loss_csv, DiffusionSchedule, SampleConfig,
    TrainConfig,
};
use locdiff::geo::{
    accuracy_report, anchor_robustness, default_rho, format_reports, lat_lon_of,
    perturbation_drift, point_from_lat_lon, resolution_sweep, GeoMetricsReport,
};
use locdiff::shdd::{anchors_from_spec, encode, CoefficientMagnitudes, ModeDecoder};
use locdiff::sphharm::degree_order;
use locdiff::{AnchorSet, CsUnet, Degree, SphericalPoint};
use ndarray::Array2;
use serde::Serialize;

use crate::io::{output, read_conditions, read_lat_lon, read_vector};
use crate::{
    BenchArgs, BenchWhat, Cli, Cmd, DataKind, DecodeArgs, EncodeArgs, EvalMode, GenDataArgs,
    ReportFormat, SampleArgs, SamplingArgs, TrainArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.cmd {
        Cmd::Encode(a) => encode_cmd(a),
        Cmd::Decode(a) => decode_cmd(a, seed.unwrap_or(0)),
        Cmd::Train(a) => train_cmd(a, seed),
        Cmd::Sample(a) => sample_cmd(a, seed.unwrap_or(0)),
        Cmd::Eval { mode } => eval_cmd(mode, seed.unwrap_or(0)),
        Cmd::Bench(a) => bench_cmd(a, seed.unwrap_or(0)),
        Cmd::GenData(a) => gen_data_cmd(a, seed.unwrap_or(0)),
    }
}

fn gen_data_cmd(a: GenDataArgs, seed: u64) -> Result<()> {
    let records = match a.kind {
        DataKind::Cities => {
            let mut cfg = CitiesConfig::new(a.k, a.n, a.cond_dim, seed);
            cfg.noise_km = a.noise_km;
            cfg.cond_noise = a.cond_noise;
            gen_cities(&cfg)?.records
        }
        DataKind::Embedded => gen_embedded_loc(
            a.n,
            a.cond_dim,
            Degree::new(a.source_degree)?,
            Projection::Random,
            a.cond_noise,
            seed,
        )?,
    };
    save_dataset(&a.out, &records)?;
    log::info!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn encode_cmd(a: EncodeArgs) -> Result<()> {
    let degree = Degree::new(a.degree)?;
    let p: SphericalPoint = point_from_lat_lon(a.lat, a.lon)?;
    let e = encode(&p, degree);
    let mut w = output(a.out.as_deref())?;
    for v in &e.coeffs {
        writeln!(w, "{v}")?;
    }
    w.flush()?;
    if a.out.is_some() {
        println!("{}", e.dim());
    } else {
        log::info!("dimension {}", e.dim());
    }
    Ok(())
}

fn resolve_rho(rho: Option<f64>, degree: Degree) -> f64 {
    rho.unwrap_or_else(|| {
        let r = default_rho(degree);
        log::info!("rho not given; using pi/(2L) = {r:.6} rad");
        r
    })
}

fn decode_cmd(a: DecodeArgs, seed: u64) -> Result<()> {
    let e = read_vector(&a.encoding_file)?;
    let degree = Degree::from_dim(e.len())
        .with_context(|| format!("{} values is not a square (L+1)^2 count", e.len()))?;
    let anchors: AnchorSet = anchors_from_spec(&a.anchors_spec, degree, seed)?;
    let rho = resolve_rho(a.rho, degree);
    let p = ModeDecoder::new(&anchors, rho)?.decode(&e)?;
    let (lat, lon) = lat_lon_of(&p);
    println!("{lat},{lon}");
    Ok(())
}

fn train_cmd(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    cfg.validate()?;
    ensure!(
        a.dataset.exists(),
        "dataset {} does not exist",
        a.dataset.display()
    );
    let records = split(&load_dataset(&a.dataset, None)?, Split::Train);
    ensure!(
        !records.is_empty(),
        "dataset {} has no train records",
        a.dataset.display()
    );
    let lookup = match &a.cache_dir {
        Some(dir) => build_lookup_cached::<f64>(&records, cfg.degree, dir)?,
        None => build_lookup::<f64>(&records, cfg.degree)?,
    };
    let set = lookup.into_train_set(&records)?;
    log::info!(
        "training on {} records, L = {}, {} epochs, batch {}",
        set.len(),
        cfg.degree.get(),
        cfg.epochs,
        cfg.batch_size
    );
    let out = train(&set, &cfg, |r| {
        if r.step % 50 == 0 {
            log::info!(
                "step {} loss {:.5} grad_norm {:.4}",
                r.step,
                r.loss,
                r.grad_norm
            );
        }
    })?;
    save_checkpoint(&a.out, &out.model, Some(&out.adam), Some(&cfg))?;
    let log_path = a.loss_log.unwrap_or_else(|| suffixed(&a.out, ".loss.csv"));
    write_loss_csv(&log_path, &out.log)?;
    log::info!(
        "wrote {} and {} ({} steps)",
        a.out.display(),
        log_path.display(),
        out.log.len()
    );
    Ok(())
}

fn suffixed(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Network, schedule and degree recorded in a checkpoint.
fn load_model(ckpt: &Path) -> Result<(CsUnet, DiffusionSchedule, Degree)> {
    let (model, _) = load_checkpoint::<f64>(ckpt)?;
    let schedule = match load_meta(ckpt).ok().and_then(|m| m.train) {
        Some(t) => t.schedule()?,
        None => DiffusionSchedule::standard(),
    };
    let degree = Degree::from_dim(model.config().dim)?;
    Ok((model, schedule, degree))
}

fn sample_config(s: &SamplingArgs, seed: u64) -> SampleConfig {
    SampleConfig {
        steps: s.steps,
        ensemble: s.ensemble,
        jitter_sigma: s.jitter,
        rho: s.rho,
        seed,
    }
}

fn conditions(rows: Vec<Vec<f64>>, want: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((rows.len(), want));
    for (i, r) in rows.iter().enumerate() {
        ensure!(
            r.len() == want,
            "condition {i} has {} entries but the checkpoint expects {want}",
            r.len()
        );
        m.row_mut(i).assign(&ndarray::ArrayView1::from(r));
    }
    Ok(m)
}

#[derive(Serialize)]
struct PredictionLine {
    index: usize,
    lat: f64,
    lon: f64,
    candidates: Vec<[f64; 2]>,
}

fn sample_cmd(a: SampleArgs, seed: u64) -> Result<()> {
    let (model, schedule, degree) = load_model(&a.ckpt)?;
    let conds = conditions(read_conditions(&a.condition_file)?, model.config().cond_dim)?;
    let cfg = sample_config(&a.sampling, seed);
    let anchors: AnchorSet = anchors_from_spec(&a.anchors_spec, degree, seed)?;
    let rho = resolve_rho(cfg.rho, degree);
    let decoder = ModeDecoder::new(&anchors, rho)?;
    log::info!(
        "sampling {} conditions x {} members, {} steps",
        conds.nrows(),
        cfg.ensemble,
        cfg.steps
    );
    let latents = sample_latents(&model, conds.view(), degree.dim(), &cfg, &schedule)?;
    let preds = decode_ensembles(&latents, &decoder)?;
    let mut w = output(a.out.as_deref())?;
    for (index, p) in preds.iter().enumerate() {
        let (lat, lon) = lat_lon_of(&p.point);
        let line = PredictionLine {
            index,
            lat,
            lon,
            candidates: p
                .candidates
                .iter()
                .map(|c| {
                    let (la, lo) = lat_lon_of(c);
                    [la, lo]
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn to_points(v: &[(f64, f64)]) -> Result<Vec<SphericalPoint>> {
    v.iter()
        .map(|&(lat, lon)| Ok(point_from_lat_lon(lat, lon)?))
        .collect()
}

fn print_reports(reports: &[GeoMetricsReport], format: ReportFormat) {
    match format {
        ReportFormat::Csv => {
            println!("{}", GeoMetricsReport::CSV_HEADER);
            for r in reports {
                println!("{}", r.csv_row());
            }
        }
        ReportFormat::Table => print!("{}", format_reports(reports)),
    }
}

fn eval_cmd(mode: EvalMode, seed: u64) -> Result<()> {
    match mode {
        EvalMode::Metrics {
            preds,
            truths,
            label,
            format,
        } => {
            let p = to_points(&read_lat_lon(&preds)?)?;
            let t = to_points(&read_lat_lon(&truths)?)?;
            ensure!(
                p.len() == t.len(),
                "{} predictions but {} truths",
                p.len(),
                t.len()
            );
            let mut r = accuracy_report(&p, &t)?;
            r.label = label;
            print_reports(&[r], format);
        }
        EvalMode::ResolutionSweep {
            degrees,
            points: n,
            anchors_spec,
        } => {
            let degrees: Vec<Degree> = degrees
                .into_iter()
                .map(Degree::new)
                .collect::<Result<_, _>>()?;
            let rows = resolution_sweep::<f64, _>(
                &degrees,
                |d| anchors_from_spec(&anchors_spec, d, seed),
                n,
                seed,
            )?;
            println!("degree,threshold_km,median_km,p90_km,max_km,within_threshold");
            for r in rows {
                println!(
                    "{},{:.1},{:.3},{:.3},{:.3},{:.4}",
                    r.degree, r.threshold_km, r.median_km, r.p90_km, r.max_km, r.within_threshold
                );
            }
        }
        EvalMode::Drift {
            degree,
            sigma2,
            trials,
            anchors_spec,
        } => {
            let degree = Degree::new(degree)?;
            let anchors: AnchorSet = anchors_from_spec(&anchors_spec, degree, seed)?;
            println!("degree,sigma2,median_km,mean_km,p95_km");
            for s in sigma2 {
                let d = perturbation_drift(degree, s, trials, &anchors, seed)?;
                println!(
                    "{},{},{:.3},{:.3},{:.3}",
                    d.degree, d.sigma2, d.median_km, d.mean_km, d.p95_km
                );
            }
        }
        EvalMode::AnchorRobustness {
            ckpt,
            dataset,
            anchors_specs,
            sampling,
        } => {
            ensure!(
                anchors_specs.len() >= 2,
                "give at least two --anchors-spec values"
            );
            let (model, schedule, degree) = load_model(&ckpt)?;
            let test = split(
                &load_dataset(&dataset, Some(model.config().cond_dim))?,
                Split::Test,
            );
            ensure!(
                !test.is_empty(),
                "dataset {} has no test records",
                dataset.display()
            );
            let cfg = sample_config(&sampling, seed);
            let conds = conditions_matrix::<f64>(&test)?;
            let truths = points::<f64>(&test)?;
            let latents = sample_latents(&model, conds.view(), degree.dim(), &cfg, &schedule)?;
            let sets: Vec<AnchorSet> = anchors_specs
                .iter()
                .map(|s| anchors_from_spec(s, degree, seed))
                .collect::<Result<_, _>>()?;
            let labeled: Vec<(&str, &AnchorSet)> = anchors_specs
                .iter()
                .map(String::as_str)
                .zip(sets.iter())
                .collect();
            let rho = resolve_rho(cfg.rho, degree);
            let reports = anchor_robustness(&latents, &truths, &labeled, rho)?;
            print_reports(&reports, ReportFormat::Csv);
        }
    }
    Ok(())
}

fn bench_cmd(a: BenchArgs, seed: u64) -> Result<()> {
    let degree = Degree::new(a.degree)?;
    let print = |r: BenchRow| {
        println!("{}", BenchRow::CSV_HEADER);
        println!("{}", r.csv_row());
    };
    match a.what {
        BenchWhat::Encode => print(bench_encode::<f64>(degree, 10_000, seed)),
        BenchWhat::Decode => {
            let spec = a.anchors_spec.as_deref().unwrap_or("fibonacci:100000");
            let anchors: AnchorSet = anchors_from_spec(spec, degree, seed)?;
            print(bench_decode(&anchors, a.batch, a.reps, seed)?);
        }
        BenchWhat::Kl => {
            let spec = a.anchors_spec.as_deref().unwrap_or("random:2048");
            let anchors: AnchorSet = anchors_from_spec(spec, degree, seed)?;
            print(bench_kl(&anchors, a.batch, a.reps, seed)?);
        }
        BenchWhat::CoeffMagnitude => {
            let mags = CoefficientMagnitudes::compute(degree, a.grid_points);
            println!("index,l,m,max_abs");
            for (i, v) in mags.max_abs.iter().enumerate() {
                let (l, m) = degree_order(i);
                println!("{i},{l},{m},{v:.9}");
            }
        }
        BenchWhat::Sample => {
            let (model, schedule) = match &a.ckpt {
                Some(p) => {
                    let (m, s, _) = load_model(p)?;
                    (m, s)
                }
                None => {
                    let mut cfg = TrainConfig {
                        degree,
                        ..TrainConfig::default()
                    };
                    cfg.seed = seed;
                    let net = cfg.net_config(a.cond_dim);
                    (CsUnet::seeded(net, seed)?, DiffusionSchedule::standard())
                }
            };
            let cfg = SampleConfig {
                seed,
                ..SampleConfig::default()
            };
            print(bench_sample(&model, 1, &cfg, &schedule)?);
        }
    }
    Ok(())
}
