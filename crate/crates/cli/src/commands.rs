use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use msrnn_core::cost::{instrument, CostModelParams, CostReport};
use msrnn_core::data::{
    generate_moving_mnist, mix_seed, montage, read_idx_images, read_stf1, synthetic_glyphs, write_pgm, write_stf1,
    DigitSource, MovingMnistConfig, SequenceDataset,
};
use msrnn_core::metrics::WeightMap;
use msrnn_core::stack::{
    build_stack, receptive_field_empirical, receptive_field_theoretical, SkipMode, StackConfig,
};
use msrnn_core::training::{self, checkpoint_load, model_from_checkpoint, targets, TrainConfig};
use msrnn_core::{Error, Result};

use crate::{AnalyzeArgs, EvalArgs, ExportArgs, GenDataArgs, ModelArgs, RfArgs, TrainArgs};

fn glyph_source(idx: Option<&Path>, seed: u64) -> Result<(DigitSource, String)> {
    match idx {
        Some(p) => Ok((read_idx_images(p)?, format!("idx {}", p.display()))),
        None => Ok((synthetic_glyphs(seed), format!("synthetic glyphs, seed {seed} (no IDX file given)"))),
    }
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let mut provenance = String::from("# bouncing-digit sequences\n");
    for (split, count, idx, stream) in [
        ("train", a.count, a.idx_train.as_deref(), 0u64),
        ("test", a.test_count, a.idx_test.as_deref(), 1u64),
    ] {
        let (source, origin) = glyph_source(idx, mix_seed(a.seed, 2 + stream))?;
        let cfg = MovingMnistConfig {
            count,
            digits: a.digits,
            size: a.size,
            frames: a.frames,
            seed: mix_seed(a.seed, stream),
            ..Default::default()
        };
        let seqs = generate_moving_mnist(&source, &cfg)?;
        let path = a.out.join(format!("{split}.stf1"));
        write_stf1(&path, &seqs)?;
        let [s, t, c, h, w] = seqs.dims();
        writeln!(
            provenance,
            "[{split}]\nfile = {}\ndims = {s}x{t}x{c}x{h}x{w}\nglyphs = {origin}\nglyph_count = {}\nsequence_seed = {}\nspeed = {}..{} px/frame\n",
            path.file_name().unwrap().to_string_lossy(),
            source.len(),
            cfg.seed,
            cfg.speed.0,
            cfg.speed.1
        )
        .unwrap();
        eprintln!("wrote {} ({s} sequences)", path.display());
    }
    writeln!(
        provenance,
        "[parameters]\ncount = {}\ntest_count = {}\nsize = {}\ndigits = {}\nframes = {}\nseed = {}",
        a.count, a.test_count, a.size, a.digits, a.frames, a.seed
    )
    .unwrap();
    fs::write(a.out.join("provenance.txt"), provenance)?;
    Ok(())
}

fn stack_config(m: &ModelArgs, channels: usize) -> Result<StackConfig> {
    let cfg = StackConfig {
        cell: m.cell,
        zigzag: m.zigzag,
        diagonal: m.diagonal,
        layers: m.layers,
        hidden: m.hidden,
        kernel: m.kernel,
        multiscale: m.variant == "ms",
        skip: m.skip,
        in_channels: channels,
        out_channels: channels,
        history: m.history,
        horizon: m.horizon,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(path: &Path, history: usize, horizon: usize) -> Result<SequenceDataset> {
    SequenceDataset::new(read_stf1(path)?, history, horizon)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let train_data = load_dataset(&a.train_data, a.model.history, a.model.horizon)?;
    let stack = stack_config(&a.model, train_data.sequences.channels())?;
    stack.check_frame_size(train_data.sequences.height(), train_data.sequences.width())?;
    let test_data = match &a.test_data {
        Some(p) => Some(load_dataset(p, a.model.history, a.model.horizon)?),
        None => None,
    };
    let cfg = TrainConfig {
        stack,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        loss: a.loss,
        decay_fraction: a.decay,
        seed: a.seed,
        clip: (!a.no_clip).then_some(a.clip),
        stop_after: a.stop_after,
        checkpoint: Some(a.checkpoint.clone()),
        log: a.log.clone(),
    };
    let resume = match &a.resume {
        Some(p) => Some(checkpoint_load(p)?),
        None => None,
    };
    let out = training::train(&cfg, &train_data, test_data.as_ref(), resume.as_ref())?;
    println!("{}", training::EpochRecord::CSV_HEADER);
    for r in &out.epochs {
        println!("{}", r.csv_row());
    }
    eprintln!("checkpoint {} at iteration {}", a.checkpoint.display(), out.optimizer.step);
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = checkpoint_load(&a.checkpoint)?;
    let (model, _) = model_from_checkpoint(&ckpt)?;
    let cfg = model.config();
    let data = load_dataset(&a.data, cfg.history, cfg.horizon)?;
    let weights = WeightMap::default();
    let thresholds = (!a.thresholds.is_empty()).then_some((a.thresholds.as_slice(), &weights));
    let report = training::evaluate(&model, &data, a.batch_size, thresholds)?;
    let csv = report.metrics.to_csv();
    print!("{csv}");
    if let Some(p) = &a.csv {
        fs::write(p, &csv)?;
    }
    if let Some(s) = &report.skill {
        println!("threshold,csi,hss");
        for (i, t) in s.thresholds.iter().enumerate() {
            println!("{t},{},{}", s.csi[i], s.hss[i]);
        }
        println!("b_mse,{}\nb_mae,{}", s.b_mse, s.b_mae);
    }
    Ok(())
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    let p = CostModelParams {
        layers: a.layers,
        steps: a.steps,
        batch: a.batch,
        channels: a.channels,
        height: a.height,
        width: a.width,
        kernel: a.kernel,
        u_tilde: a.u_tilde,
        u: a.u,
    };
    let report = CostReport::new(p)?;
    print!("{}", report.to_text());
    if let Some(path) = &a.csv {
        fs::write(path, report.to_csv())?;
    }
    if a.measure {
        if a.steps < 2 {
            return Err(Error::config("--measure needs at least 2 steps"));
        }
        let mut measured = Vec::new();
        for ms in [false, true] {
            let mut cfg = StackConfig::convlstm(a.layers, a.channels, ms, SkipMode::None);
            cfg.kernel = a.kernel;
            cfg.in_channels = a.channels;
            cfg.history = a.steps / 2;
            cfg.horizon = a.steps - a.steps / 2;
            cfg.check_frame_size(a.height, a.width)?;
            let model = build_stack(&cfg, 0)?;
            measured.push(instrument(&model, a.batch, a.height, a.width, 0)?);
        }
        let (flat, ms) = (measured[0], measured[1]);
        let mem_ratio = ms.stored_elements as f64 / flat.stored_elements as f64;
        let flops_ratio = ms.conv_flops as f64 / flat.conv_flops as f64;
        println!("measured (tape)");
        println!("  stored elements       plain {}  ms {}  ratio {mem_ratio:.4}", flat.stored_elements, ms.stored_elements);
        println!("  conv FLOPs            plain {}  ms {}  ratio {flops_ratio:.4}", flat.conv_flops, ms.conv_flops);
        println!("  FLOPs reduction       {:.4}%", 100.0 * (1.0 - flops_ratio));
    }
    Ok(())
}

pub fn rf(a: RfArgs) -> Result<()> {
    let stack = stack_config(&a.model, 1)?;
    stack.check_frame_size(a.size, a.size)?;
    let model = build_stack(&stack, a.seed)?;
    let schedule = stack.schedule();
    println!("layer,scale,theoretical,measured_h,measured_w");
    for l in 0..stack.layers.div_ceil(2) {
        let theory = receptive_field_theoretical(&schedule, stack.kernel, l);
        let f = 1usize << schedule.level(l);
        let pos = (a.size / f / 2, a.size / f / 2);
        let b = receptive_field_empirical(&model, (a.size, a.size), l, 0, pos)?;
        println!("{l},1/{f},{theory},{},{}", b.height(), b.width());
    }
    Ok(())
}

pub fn export(a: ExportArgs) -> Result<()> {
    let ckpt = checkpoint_load(&a.checkpoint)?;
    let (model, _) = model_from_checkpoint(&ckpt)?;
    let cfg = model.config().clone();
    let full = load_dataset(&a.data, cfg.history, cfg.horizon)?;
    if let Some(&bad) = a.indices.iter().find(|&&i| i >= full.len()) {
        return Err(Error::config(format!("sequence index {bad} out of range ({} sequences)", full.len())));
    }
    let data = SequenceDataset::new(full.sequences.select(&a.indices), cfg.history, cfg.horizon)?;
    let preds = training::predict(&model, &data, 8)?;
    let truth = targets(&data);
    let (h, w) = (data.sequences.height(), data.sequences.width());
    let plane = h * w;
    fs::create_dir_all(&a.out)?;
    for (k, &s) in a.indices.iter().enumerate() {
        let mut rows: Vec<Vec<Vec<f32>>> = vec![Vec::new(); 4];
        for t in 0..cfg.history {
            rows[0].push(data.sequences.frame(k, t)[..plane].to_vec());
        }
        for t in 0..cfg.horizon {
            let tr = &truth.frame(k, t)[..plane];
            let pr: Vec<f32> = preds.frame(k, t)[..plane].iter().map(|v| v.clamp(0.0, 1.0)).collect();
            let diff: Vec<f32> = tr.iter().zip(&pr).map(|(a, b)| (a - b).abs()).collect();
            let step = cfg.history + t + 1;
            write_pgm(&a.out.join(format!("seq{s}_t{step:02}_truth.pgm")), tr, h, w)?;
            write_pgm(&a.out.join(format!("seq{s}_t{step:02}_pred.pgm")), &pr, h, w)?;
            write_pgm(&a.out.join(format!("seq{s}_t{step:02}_diff.pgm")), &diff, h, w)?;
            rows[1].push(tr.to_vec());
            rows[2].push(pr);
            rows[3].push(diff);
        }
        if a.montage {
            let refs: Vec<Vec<&[f32]>> = rows.iter().map(|r| r.iter().map(Vec::as_slice).collect()).collect();
            let (px, mh, mw) = montage(&refs, h, w, 2)?;
            write_pgm(&a.out.join(format!("seq{s}_montage.pgm")), &px, mh, mw)?;
        }
    }
    eprintln!("exported {} sequences to {}", a.indices.len(), a.out.display());
    Ok(())
}
