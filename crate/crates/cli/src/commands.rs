use std::fs;
use std::path::{Path, PathBuf};

use gcq::attractor::{fixed_point_residual, Connectivity, Topology};
use gcq::cogmap::{infer_actions, plan as plan_route, predict as roll_forward, replay_states, Termination};
use gcq::config::RunConfig;
use gcq::gridworld::{checksum, generate_dataset, render, Dataset, EnvState, Frame};
use gcq::model::{frames_matrix, mse, psnr, CognitiveState, WorldModel};
use gcq::pnm::Image;
use gcq::train::{write_metrics, Checkpoint, Prepared, Trainer};
use gcq::GcqError;

use crate::Failure;

pub fn parse_cell(s: &str) -> Result<EnvState, Failure> {
    let bad = || Failure::Runtime(format!("cell `{s}` is not `row,col`"));
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    Ok(EnvState {
        row: r.trim().parse().map_err(|_| bad())?,
        col: c.trim().parse().map_err(|_| bad())?,
    })
}

fn output_dir(config: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = config.paths.output.clone();
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn read_dataset(path: &Path) -> Result<Dataset, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::Runtime(format!("cannot read dataset {}: {e}", path.display())))?;
    Ok(Dataset::from_bytes(&bytes)?)
}

fn write_checkpoint(path: &Path, ck: &Checkpoint) -> gcq::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ck.to_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn load_model(config: &RunConfig) -> Result<WorldModel, Failure> {
    Ok(load_trainer(config)?.model)
}

fn frame_image(frame: &Frame) -> Result<Image, Failure> {
    Ok(Image::from_gray(frame.width, frame.height, &frame.to_f64())?)
}

fn row_image(height: usize, width: usize, row: &[f64]) -> Result<Image, Failure> {
    Ok(Image::from_gray(width, height, row)?)
}

fn write_image(path: &Path, img: &Image) -> Result<(), Failure> {
    fs::write(path, img.to_bytes())?;
    Ok(())
}

/// Nearest-neighbour enlargement so tiny rings remain visible.
fn upscale(img: &Image, s: usize) -> Image {
    let (w, h) = (img.width * s, img.height * s);
    let mut data = Vec::with_capacity(w * h * img.channels);
    for y in 0..h {
        for x in 0..w {
            let src = ((y / s) * img.width + x / s) * img.channels;
            data.extend_from_slice(&img.data[src..src + img.channels]);
        }
    }
    Image {
        width: w,
        height: h,
        channels: img.channels,
        data,
    }
}

fn check_cell(config: &RunConfig, cell: EnvState) -> Result<(), Failure> {
    let maze = &config.env.maze;
    if cell.row >= maze.height || cell.col >= maze.width || maze.is_wall(cell.row, cell.col) {
        return Err(Failure::Runtime(format!(
            "cell {},{} is not a free cell of the maze",
            cell.row, cell.col
        )));
    }
    Ok(())
}

pub fn gen_data(config: &RunConfig, out: &Path) -> Result<(), Failure> {
    let d = &config.data;
    let data = generate_dataset(&config.env.maze, d.records, d.length, config.env.policy, d.seed)?;
    let bytes = data.to_bytes();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, &bytes)?;
    println!(
        "records {} length {} checksum {:016x}",
        data.records.len(),
        data.length,
        checksum(&bytes)
    );
    Ok(())
}

pub fn train(config: &RunConfig, resume: bool, eval: Option<&Path>) -> Result<(), Failure> {
    let dataset = read_dataset(&config.paths.dataset)?;
    let mut trainer = if resume {
        load_trainer(config)?
    } else {
        Trainer::new(
            config.codebook()?,
            dataset.height * dataset.width,
            config.model.clone(),
            config.training.clone(),
        )?
    };
    let data = Prepared::new(&trainer.model, &dataset)?;
    let eval_data = match eval {
        Some(p) => Some(Prepared::new(&trainer.model, &read_dataset(p)?)?),
        None => None,
    };
    let dir = output_dir(config)?;
    let metrics_path = dir.join("metrics.csv");
    let append = resume && metrics_path.exists();
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&metrics_path)?;
    if !append {
        write_metrics(&mut metrics, &[], true)?;
    }
    let ck_path = config.paths.checkpoint.clone();
    let result = trainer.fit(&data, Some(eval_data.as_ref().unwrap_or(&data)), |row, t| {
        write_metrics(&mut metrics, std::slice::from_ref(row), false)?;
        write_checkpoint(&ck_path, &t.checkpoint()?)?;
        println!(
            "epoch {} recon_mse {:.6} psnr {:.2} commit {:.6}",
            row.epoch, row.recon_mse, row.psnr_reconstruction, row.commit_loss
        );
        Ok(())
    });
    match result {
        Ok(_) => Ok(()),
        Err(GcqError::TrainingDiverged { epoch, last_good }) => {
            write_checkpoint(&ck_path, &last_good)?;
            Err(Failure::Runtime(format!(
                "training diverged at epoch {epoch}; checkpoint from epoch {} kept at {}",
                last_good.epoch,
                ck_path.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn load_trainer(config: &RunConfig) -> Result<Trainer, Failure> {
    let path = &config.paths.checkpoint;
    let bytes =
        fs::read(path).map_err(|e| Failure::Runtime(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    Ok(Trainer::resume(
        ck,
        config.codebook()?,
        config.model.clone(),
        config.training.clone(),
    )?)
}

pub fn predict(
    config: &RunConfig,
    data: &Path,
    record: usize,
    init: usize,
    horizon: usize,
    actions: Option<&str>,
) -> Result<(), Failure> {
    let model = load_model(config)?;
    let dataset = read_dataset(data)?;
    let rec = dataset.records.get(record).ok_or_else(|| {
        Failure::Runtime(format!(
            "record {record} out of range ({} records)",
            dataset.records.len()
        ))
    })?;
    let env_actions = model.action_ids(&rec.actions)?;
    if init == 0 {
        return Err(Failure::Runtime("initialization length must be at least 1".into()));
    }
    let custom = match actions {
        Some(s) => {
            let symbols: Vec<&str> = s.split(',').map(str::trim).filter(|t| !t.is_empty()).collect();
            Some(model.codebook.action_map().resolve(&symbols)?)
        }
        None => None,
    };
    let needed = if custom.is_some() { init } else { init + horizon };
    if needed > dataset.length {
        return Err(Failure::Runtime(format!(
            "initialization {init} plus horizon {horizon} exceeds trajectory length {}",
            dataset.length
        )));
    }
    let future = custom
        .clone()
        .unwrap_or_else(|| env_actions[init - 1..init - 1 + horizon].to_vec());
    let frames = &rec.frames[..init];
    let p = roll_forward(&model, frames, &env_actions[..init - 1], &future)?;

    let x = frames_matrix(frames)?;
    let q = model.quantize_frames(&x, &env_actions[..init - 1])?;
    let recon = model.decode(&q.s_hat)?;
    let recon_psnr = psnr(mse(
        recon.as_standard_layout().as_slice().unwrap(),
        x.as_standard_layout().as_slice().unwrap(),
    ));

    let (h, w) = (dataset.height, dataset.width);
    let dir = output_dir(config)?;
    let mut report = String::from("horizon,psnr\n");
    println!(
        "bases {}",
        p.bases.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
    );
    println!("horizon 0 psnr {recon_psnr:.3}");
    report.push_str(&format!("0,{recon_psnr}\n"));
    let last_init = rec.frames[init - 1].to_f64();
    match custom {
        None => {
            for t in 1..=horizon {
                let truth = rec.frames[init - 1 + t].to_f64();
                let v = psnr(mse(p.frames.row(t).as_slice().unwrap(), &truth));
                println!("horizon {t} psnr {v:.3}");
                report.push_str(&format!("{t},{v}\n"));
            }
            let truth: Vec<Image> = rec.frames[init..init + horizon]
                .iter()
                .map(frame_image)
                .collect::<Result<_, _>>()?;
            if !truth.is_empty() {
                write_image(&dir.join("predict_truth.pgm"), &Image::strip(&truth)?)?;
            }
        }
        Some(_) => {
            let last = p.frames.row(p.frames.nrows() - 1);
            let v = psnr(mse(last.as_slice().unwrap(), &last_init));
            println!("final psnr {v:.3} (against last initialization frame)");
            report.push_str(&format!("final,{v}\n"));
        }
    }
    fs::write(dir.join("predict.csv"), report)?;
    let init_imgs: Vec<Image> = frames.iter().map(frame_image).collect::<Result<_, _>>()?;
    write_image(&dir.join("predict_init.pgm"), &Image::strip(&init_imgs)?)?;
    let first = if horizon == 0 && actions.is_none() { 0 } else { 1 };
    let pred_imgs: Vec<Image> = (first..p.frames.nrows())
        .map(|t| row_image(h, w, &p.frames.row(t).to_vec()))
        .collect::<Result<_, _>>()?;
    if !pred_imgs.is_empty() {
        write_image(&dir.join("predict_pred.pgm"), &Image::strip(&pred_imgs)?)?;
    }
    Ok(())
}

pub fn plan(config: &RunConfig, start: EnvState, goal: EnvState, max_steps: Option<usize>) -> Result<(), Failure> {
    check_cell(config, start)?;
    check_cell(config, goal)?;
    let model = load_model(config)?;
    let maze = &config.env.maze;
    let limit = max_steps.unwrap_or(2 * maze.free_cells().len());
    let trace = plan_route(&model, maze, start, &render(maze, goal), limit)?;
    let dir = output_dir(config)?;
    let mut csv = Vec::new();
    trace.write_csv(&mut csv)?;
    fs::write(dir.join("plan.csv"), csv)?;
    let imgs: Vec<Image> = trace.observations.iter().map(frame_image).collect::<Result<_, _>>()?;
    write_image(&dir.join("plan_frames.pgm"), &Image::strip(&imgs)?)?;
    let oracle = maze
        .shortest_path_len(start, goal)
        .map_or_else(|| "unreachable".to_string(), |d| d.to_string());
    let end = trace.positions.last().copied().unwrap_or(start);
    match trace.terminated_by {
        Termination::GoalReached => {
            println!(
                "steps {} oracle {oracle} reached {} ends {},{}",
                trace.steps(),
                end == goal,
                end.row,
                end.col
            );
            if end == goal {
                Ok(())
            } else {
                Err(Failure::Runtime(format!(
                    "cell {},{} localizes to the goal state but is not the goal",
                    end.row, end.col
                )))
            }
        }
        Termination::StepLimit => {
            println!(
                "steps {} oracle {oracle} reached false ends {},{}",
                trace.steps(),
                end.row,
                end.col
            );
            Err(Failure::Runtime(format!(
                "step limit of {limit} exceeded; trace written to {}",
                dir.display()
            )))
        }
    }
}

pub fn invert(
    config: &RunConfig,
    trajectory: &Path,
    record: usize,
    transport_from: Option<EnvState>,
) -> Result<(), Failure> {
    let model = load_model(config)?;
    let dataset = read_dataset(trajectory)?;
    let rec = dataset.records.get(record).ok_or_else(|| {
        Failure::Runtime(format!(
            "record {record} out of range ({} records)",
            dataset.records.len()
        ))
    })?;
    let states = rec
        .frames
        .iter()
        .map(|f| model.localize(f))
        .collect::<gcq::Result<Vec<_>>>()?;
    let map = model.codebook.action_map();
    let mut lines = String::new();
    let mut recovered = Vec::new();
    let mut failures = 0;
    for (i, pair) in states.windows(2).enumerate() {
        match infer_actions(&model.codebook, pair) {
            Ok(segments) => {
                let seg = &segments[0];
                let symbols: Vec<&str> = seg.iter().map(|&a| map.symbol(a)).collect();
                lines.push_str(&format!("{i} {}\n", symbols.join(" ")));
                recovered.extend(seg.iter().copied());
            }
            Err(GcqError::NoProgress { from, to, .. }) => {
                failures += 1;
                lines.push_str(&format!("{i} no-progress\n"));
                eprintln!("pair {i}: no progress from {from:?} to {to:?}");
            }
            Err(e) => return Err(e.into()),
        }
    }
    print!("{lines}");
    let dir = output_dir(config)?;
    fs::write(dir.join("actions.txt"), &lines)?;
    if let Some(cell) = transport_from {
        check_cell(config, cell)?;
        let start = model.localize(&render(&config.env.maze, cell))?;
        let moved = replay_states(&model.codebook, &start, &recovered)?;
        let source = replay_states(&model.codebook, &states[0], &recovered)?;
        write_transport(&dir, &model, &source, &moved, dataset.height, dataset.width)?;
    }
    if failures > 0 {
        return Err(Failure::Runtime(format!("{failures} pair(s) made no progress")));
    }
    Ok(())
}

fn write_transport(
    dir: &Path,
    model: &WorldModel,
    source: &[CognitiveState],
    moved: &[CognitiveState],
    h: usize,
    w: usize,
) -> Result<(), Failure> {
    let mut csv = String::from("t,source,transported\n");
    for (t, (a, b)) in source.iter().zip(moved).enumerate() {
        let fmt = |s: &CognitiveState| s.0.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        csv.push_str(&format!("{t},{},{}\n", fmt(a), fmt(b)));
    }
    fs::write(dir.join("transport.csv"), csv)?;
    let frames = model.decode_states(moved)?;
    let imgs: Vec<Image> = frames
        .rows()
        .into_iter()
        .map(|r| row_image(h, w, &r.to_vec()))
        .collect::<Result<_, _>>()?;
    write_image(&dir.join("transport.pgm"), &Image::strip(&imgs)?)
}

pub fn inspect(config: &RunConfig, samples: usize) -> Result<(), Failure> {
    let codebook = config.codebook()?;
    let dir = output_dir(config)?;
    let mut table = String::from("factor,index,residual\n");
    let mut worst: f64 = 0.0;
    for (j, f) in codebook.factors().iter().enumerate() {
        let conn = Connectivity::new(&f.params);
        for i in 0..f.len() {
            let r = fixed_point_residual(&f.params, &conn, i)?;
            worst = worst.max(r);
            table.push_str(&format!("{j},{i},{r:e}\n"));
        }
        let n = f.params.neurons_per_axis;
        let (w, h, scale) = match f.topology() {
            Topology::Ring => (n, 1, 8),
            Topology::Torus => (n, n, 4),
        };
        let peak = f
            .codewords()
            .iter()
            .flatten()
            .cloned()
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        let count = samples.min(f.len());
        for s in 0..count {
            let i = s * f.len() / count;
            let values: Vec<f64> = f.codeword(i).iter().map(|v| v / peak).collect();
            let img = upscale(&Image::from_gray(w, h, &values)?, scale);
            write_image(&dir.join(format!("codeword_f{j}_{i}.pgm")), &img)?;
        }
    }
    fs::write(dir.join("residuals.csv"), table)?;
    write_image(&dir.join("grid_pattern.pgm"), &grid_pattern(&codebook)?)?;
    println!("max residual {worst:e}");
    Ok(())
}

/// Firing of neuron 0 in every factor, multiplied across factors, as the bump is
/// translated over a plane with the `down` and `right` actions.
fn grid_pattern(codebook: &gcq::codebook::Codebook) -> Result<Image, Failure> {
    let map = codebook.action_map();
    let down = map.id("down")?;
    let right = map.id("right")?;
    let period = codebook
        .factors()
        .iter()
        .map(|f| f.params.centers_per_axis())
        .max()
        .unwrap_or(1);
    let side = 3 * period;
    let origin = CognitiveState(vec![0; codebook.m()]);
    let mut values = vec![0.0; side * side];
    let mut row_start = origin;
    for y in 0..side {
        let mut s = row_start.clone();
        for x in 0..side {
            values[y * side + x] = codebook
                .factors()
                .iter()
                .zip(&s.0)
                .map(|(f, &i)| f.codeword(i)[0])
                .product();
            s = gcq::cogmap::roll_state(codebook, &s, right)?;
        }
        row_start = gcq::cogmap::roll_state(codebook, &row_start, down)?;
    }
    Ok(upscale(&Image::from_gray_autoscale(side, side, &values)?, 4))
}
