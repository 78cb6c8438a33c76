//! Run configuration: a plain-text file of `[section]` headers and `key = value` lines.
//!
//! Grammar:
//!
//! ```text
//! file    = { line "\n" }
//! line    = blank | comment | header | pair
//! comment = ws ("#" | ";") any*          (whole line only)
//! header  = ws "[" name "]" ws
//! pair    = ws key ws "=" ws value ws
//! ```
//!
//! Keys and sections may appear at most once. Every key is optional; missing
//! keys take the values of [`RunConfig::default`]. Sections:
//!
//! - `[cann]` attractor parameters shared by all factors: `topology`
//!   (`ring`|`torus`), `neurons`, `codewords` (K; a multiple of `neurons` on a
//!   ring, `neurons^2` on a torus), `tau`, `rho`, `strength`, `width`,
//!   `inhibition`, `dt`, `conv_tol`, `max_steps`, `normalization`
//!   (`global`|`local`).
//! - `[cann.J]` overrides for factor `J` (0-based), same keys as `[cann]`.
//! - `[codebook]` `factors` (at most 64), `step` (one value or a comma list per factor),
//!   `noop` (symbol of the no-op action).
//! - `[actions]` `symbol = move move ...`, one move per factor, each one of
//!   `stay`, `+1`, `-1`, `+2`, `-2`.
//! - `[model]` `encoder`, `decoder` (comma-separated hidden widths),
//!   `activation` (`relu`|`tanh`), `input_offset`, `input_scale`, `metric`
//!   (`l2`|`inner_product`), `latent_dim` (checked against the codebook).
//! - `[training]` `lr`, `beta`, `gamma`, `epochs`, `batch`, `seed`,
//!   `learnable`, `init_len`.
//! - `[env]` `height`, `width` (at most 2^20 cells), `cell_pixels`, `wraparound`, `policy`
//!   (`random_walk`|`wall_bounce`), `layout` (rows of `#`/`.` joined by `/`).
//! - `[data]` `records`, `length`, `seed`.
//! - `[paths]` `dataset`, `checkpoint`, `output`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::attractor::{CannParams, Move, Normalization, Topology};
use crate::autodiff::Activation;
use crate::codebook::{build_codebook, ActionMap, Codebook};
use crate::error::{GcqError, Result};
use crate::gridworld::{Action, MazeSpec, Policy};
use crate::model::ModelConfig;
use crate::quantizer::Metric;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub maze: MazeSpec,
    pub policy: Policy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataConfig {
    pub records: usize,
    pub length: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// One entry per codebook factor.
    pub cann: Vec<CannParams>,
    pub steps: Vec<usize>,
    pub noop: String,
    pub actions: Vec<(String, Vec<Move>)>,
    pub model: ModelConfig,
    pub latent_dim: Option<usize>,
    pub training: TrainConfig,
    pub env: EnvConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    /// Two 8-neuron rings on an 8x8 open torus with 4-pixel cells.
    fn default() -> Self {
        let ring = CannParams {
            strength: 8.0,
            inhibition: 0.84,
            ..CannParams::ring(8)
        };
        let (f, b) = (Move::Forward, Move::Backward);
        use crate::attractor::Axis::First;
        let actions = vec![
            ("stay".to_string(), vec![Move::Stay, Move::Stay]),
            ("up".to_string(), vec![b(First), Move::Stay]),
            ("down".to_string(), vec![f(First), Move::Stay]),
            ("left".to_string(), vec![Move::Stay, b(First)]),
            ("right".to_string(), vec![Move::Stay, f(First)]),
        ];
        RunConfig {
            cann: vec![ring.clone(), ring],
            steps: vec![1, 1],
            noop: "stay".into(),
            actions,
            model: ModelConfig::default(),
            latent_dim: None,
            training: TrainConfig {
                beta: 1.0,
                batch_size: 2,
                ..TrainConfig::default()
            },
            env: EnvConfig {
                maze: MazeSpec::open_torus(8, 8, 4),
                policy: Policy::RandomWalk,
            },
            data: DataConfig {
                records: 256,
                length: 32,
                seed: 1,
            },
            paths: PathsConfig {
                dataset: "data.gcqd".into(),
                checkpoint: "model.gcqc".into(),
                output: "out".into(),
            },
        }
    }
}

/// Pairs keep file order, which fixes action ids.
type Sections = BTreeMap<String, Vec<(String, String)>>;

/// Key/value pairs of one section, consumed as they are read.
struct Section {
    name: String,
    pairs: Vec<(String, String)>,
}

impl Section {
    fn take(sections: &mut Sections, name: &str) -> Self {
        Section {
            name: name.to_string(),
            pairs: sections.remove(name).unwrap_or_default(),
        }
    }

    fn err(&self, key: &str, reason: impl Into<String>) -> GcqError {
        GcqError::config(&self.name, Some(key), reason)
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        let i = self.pairs.iter().position(|(k, _)| k == key)?;
        Some(self.pairs.remove(i).1)
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.err(key, format!("cannot parse `{v}`"))),
        }
    }

    fn choice<T>(&mut self, key: &str, default: T, parse: fn(&str) -> Option<T>) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => parse(&v).ok_or_else(|| self.err(key, format!("unknown value `{v}`"))),
        }
    }

    fn list(&mut self, key: &str, default: Vec<usize>) -> Result<Vec<usize>> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) if v.trim().is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| self.err(key, format!("cannot parse `{v}`")))
                })
                .collect(),
        }
    }

    fn finish(self) -> Result<()> {
        match self.pairs.first().map(|(k, _)| k) {
            Some(k) => Err(self.err(k, "unknown key")),
            None => Ok(()),
        }
    }
}

fn lex(text: &str) -> Result<Sections> {
    let mut sections = Sections::new();
    let mut current: Option<String> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        let here = current.clone().unwrap_or_default();
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .map(str::trim)
                .filter(|n| !n.is_empty())
                .ok_or_else(|| GcqError::config(&here, None, format!("line {}: malformed header", lineno + 1)))?;
            if sections.contains_key(name) {
                return Err(GcqError::config(name, None, "duplicate section"));
            }
            sections.insert(name.to_string(), Vec::new());
            current = Some(name.to_string());
            continue;
        }
        let Some(name) = current.as_ref() else {
            return Err(GcqError::config(
                "",
                None,
                format!("line {}: key outside any section", lineno + 1),
            ));
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| GcqError::config(name, None, format!("line {}: expected `key = value`", lineno + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(GcqError::config(name, None, format!("line {}: empty key", lineno + 1)));
        }
        let pairs = sections.get_mut(name).expect("section exists");
        if pairs.iter().any(|(k, _)| k == key) {
            return Err(GcqError::config(name, Some(key), "duplicate key"));
        }
        pairs.push((key.to_string(), value.trim().to_string()));
    }
    Ok(sections)
}

/// Upper bound on `[codebook] factors`.
pub const MAX_FACTORS: usize = 64;
/// Upper bound on `height * width` of a generated maze.
pub const MAX_MAZE_CELLS: usize = 1 << 20;

fn read_cann(sec: &mut Section, base: &CannParams) -> Result<CannParams> {
    let topology = sec.choice("topology", base.topology, Topology::parse)?;
    let neurons: usize = sec.get("neurons", base.neurons_per_axis)?;
    let squared = neurons
        .checked_mul(neurons)
        .ok_or_else(|| sec.err("neurons", format!("{neurons} neurons per axis is too many")))?;
    let base_k = match (topology, base.topology) {
        (Topology::Ring, Topology::Ring) => base.subdivision.saturating_mul(neurons),
        (Topology::Ring, Topology::Torus) => neurons,
        (Topology::Torus, _) => squared,
    };
    let codewords: usize = sec.get("codewords", base_k)?;
    let subdivision = match topology {
        Topology::Ring if neurons > 0 && codewords > 0 && codewords.is_multiple_of(neurons) => codewords / neurons,
        Topology::Torus if codewords == squared => 1,
        Topology::Ring => {
            return Err(sec.err(
                "codewords",
                format!("{codewords} is not a positive multiple of {neurons} neurons"),
            ))
        }
        Topology::Torus => return Err(sec.err("codewords", "a torus has exactly neurons^2 codewords")),
    };
    let p = CannParams {
        topology,
        neurons_per_axis: neurons,
        subdivision,
        tau: sec.get("tau", base.tau)?,
        rho: sec.get("rho", base.rho)?,
        strength: sec.get("strength", base.strength)?,
        width: sec.get("width", base.width)?,
        inhibition: sec.get("inhibition", base.inhibition)?,
        dt: sec.get("dt", base.dt)?,
        conv_tol: sec.get("conv_tol", base.conv_tol)?,
        max_steps: sec.get("max_steps", base.max_steps)?,
        normalization: sec.choice("normalization", base.normalization, Normalization::parse)?,
    };
    Ok(p)
}

fn parse_moves(sec: &Section, symbol: &str, value: &str) -> Result<Vec<Move>> {
    value
        .split_whitespace()
        .map(|t| Move::parse(t).ok_or_else(|| sec.err(symbol, format!("unknown move `{t}`"))))
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections = lex(text)?;
        let d = RunConfig::default();

        let mut cb = Section::take(&mut sections, "codebook");
        let factors: usize = cb.get("factors", d.cann.len())?;
        if factors == 0 || factors > MAX_FACTORS {
            return Err(cb.err("factors", format!("need between 1 and {MAX_FACTORS} factors")));
        }
        let steps = cb.list("step", vec![1])?;
        let steps = match steps.len() {
            1 => vec![steps[0]; factors],
            n if n == factors => steps,
            n => return Err(cb.err("step", format!("{n} values for {factors} factors"))),
        };
        let noop = cb.raw("noop").unwrap_or(d.noop.clone());
        cb.finish()?;

        let mut shared = Section::take(&mut sections, "cann");
        let base_in = d.cann[0].clone();
        let base = read_cann(&mut shared, &base_in)?;
        shared.finish()?;
        let mut cann = Vec::with_capacity(factors);
        for j in 0..factors {
            let mut sec = Section::take(&mut sections, &format!("cann.{j}"));
            cann.push(read_cann(&mut sec, &base)?);
            sec.finish()?;
        }

        let mut act = Section::take(&mut sections, "actions");
        let actions = if act.pairs.is_empty() {
            d.actions.clone()
        } else {
            let pairs = std::mem::take(&mut act.pairs);
            pairs
                .iter()
                .map(|(symbol, value)| Ok((symbol.clone(), parse_moves(&act, symbol, value)?)))
                .collect::<Result<Vec<_>>>()?
        };

        let mut m = Section::take(&mut sections, "model");
        let model = ModelConfig {
            encoder_hidden: m.list("encoder", d.model.encoder_hidden.clone())?,
            decoder_hidden: m.list("decoder", d.model.decoder_hidden.clone())?,
            activation: m.choice("activation", d.model.activation, Activation::parse)?,
            input_offset: m.get("input_offset", d.model.input_offset)?,
            input_scale: m.get("input_scale", d.model.input_scale)?,
            metric: m.choice("metric", d.model.metric, Metric::parse)?,
        };
        let latent_dim = match m.raw("latent_dim") {
            None => None,
            Some(v) => Some(
                v.parse()
                    .map_err(|_| m.err("latent_dim", format!("cannot parse `{v}`")))?,
            ),
        };
        m.finish()?;

        let mut t = Section::take(&mut sections, "training");
        let training = TrainConfig {
            lr: t.get("lr", d.training.lr)?,
            beta: t.get("beta", d.training.beta)?,
            gamma: t.get("gamma", d.training.gamma)?,
            epochs: t.get("epochs", d.training.epochs)?,
            batch_size: t.get("batch", d.training.batch_size)?,
            seed: t.get("seed", d.training.seed)?,
            learnable: t.get("learnable", d.training.learnable)?,
            init_len: t.get("init_len", d.training.init_len)?,
        };
        t.finish()?;

        let mut e = Section::take(&mut sections, "env");
        let cell_pixels = e.get("cell_pixels", d.env.maze.cell_pixels)?;
        let wraparound = e.get("wraparound", d.env.maze.wraparound)?;
        let policy = e.choice("policy", d.env.policy, Policy::parse)?;
        let maze = match e.raw("layout") {
            Some(layout) => {
                let rows: Vec<&str> = layout.split('/').map(str::trim).collect();
                let maze = MazeSpec::from_ascii(&rows, cell_pixels, wraparound)
                    .map_err(|err| e.err("layout", err.to_string()))?;
                let height: usize = e.get("height", maze.height)?;
                let width: usize = e.get("width", maze.width)?;
                if (height, width) != (maze.height, maze.width) {
                    return Err(e.err(
                        "layout",
                        format!("layout is {}x{}, header says {height}x{width}", maze.height, maze.width),
                    ));
                }
                maze
            }
            None => {
                let height: usize = e.get("height", d.env.maze.height)?;
                let width: usize = e.get("width", d.env.maze.width)?;
                if height.checked_mul(width).is_none_or(|cells| cells > MAX_MAZE_CELLS) {
                    return Err(e.err(
                        "height",
                        format!("a {height}x{width} maze exceeds {MAX_MAZE_CELLS} cells"),
                    ));
                }
                MazeSpec {
                    wraparound,
                    ..MazeSpec::open_torus(height, width, cell_pixels)
                }
            }
        };
        e.finish()?;

        let mut da = Section::take(&mut sections, "data");
        let data = DataConfig {
            records: da.get("records", d.data.records)?,
            length: da.get("length", d.data.length)?,
            seed: da.get("seed", d.data.seed)?,
        };
        da.finish()?;

        let mut p = Section::take(&mut sections, "paths");
        let paths = PathsConfig {
            dataset: p.raw("dataset").map_or(d.paths.dataset.clone(), PathBuf::from),
            checkpoint: p.raw("checkpoint").map_or(d.paths.checkpoint.clone(), PathBuf::from),
            output: p.raw("output").map_or(d.paths.output.clone(), PathBuf::from),
        };
        p.finish()?;

        if let Some(name) = sections.keys().next() {
            return Err(GcqError::config(name, None, "unknown section"));
        }

        let config = RunConfig {
            cann,
            steps,
            noop,
            actions,
            model,
            latent_dim,
            training,
            env: EnvConfig { maze, policy },
            data,
            paths,
        };
        config.validate()?;
        Ok(config)
    }

    /// Canonical text form; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let cann_lines = |p: &CannParams| -> Vec<(&'static str, String)> {
            vec![
                ("topology", p.topology.name().to_string()),
                ("neurons", p.neurons_per_axis.to_string()),
                ("codewords", p.attractor_count().to_string()),
                ("tau", p.tau.to_string()),
                ("rho", p.rho.to_string()),
                ("strength", p.strength.to_string()),
                ("width", p.width.to_string()),
                ("inhibition", p.inhibition.to_string()),
                ("dt", p.dt.to_string()),
                ("conv_tol", p.conv_tol.to_string()),
                ("max_steps", p.max_steps.to_string()),
                ("normalization", p.normalization.name().to_string()),
            ]
        };
        let base = cann_lines(&self.cann[0]);
        out.push_str("[cann]\n");
        for (k, v) in &base {
            let _ = writeln!(out, "{k} = {v}");
        }
        for (j, p) in self.cann.iter().enumerate().skip(1) {
            let lines: Vec<_> = cann_lines(p)
                .into_iter()
                .zip(&base)
                .filter(|(a, b)| a.1 != b.1)
                .map(|(a, _)| a)
                .collect();
            if !lines.is_empty() {
                let _ = writeln!(out, "\n[cann.{j}]");
                for (k, v) in lines {
                    let _ = writeln!(out, "{k} = {v}");
                }
            }
        }
        let _ = writeln!(
            out,
            "\n[codebook]\nfactors = {}\nstep = {}\nnoop = {}",
            self.cann.len(),
            join(&self.steps),
            self.noop
        );
        out.push_str("\n[actions]\n");
        for (symbol, moves) in &self.actions {
            let tokens: Vec<_> = moves.iter().map(|m| m.token()).collect();
            let _ = writeln!(out, "{symbol} = {}", tokens.join(" "));
        }
        let m = &self.model;
        let _ = writeln!(
            out,
            "\n[model]\nencoder = {}\ndecoder = {}\nactivation = {}\ninput_offset = {}\ninput_scale = {}\nmetric = {}",
            join(&m.encoder_hidden),
            join(&m.decoder_hidden),
            m.activation.name(),
            m.input_offset,
            m.input_scale,
            m.metric.name()
        );
        if let Some(l) = self.latent_dim {
            let _ = writeln!(out, "latent_dim = {l}");
        }
        let t = &self.training;
        let _ = writeln!(
            out,
            "\n[training]\nlr = {}\nbeta = {}\ngamma = {}\nepochs = {}\nbatch = {}\nseed = {}\nlearnable = {}\ninit_len = {}",
            t.lr, t.beta, t.gamma, t.epochs, t.batch_size, t.seed, t.learnable, t.init_len
        );
        let e = &self.env.maze;
        let _ = writeln!(
            out,
            "\n[env]\nheight = {}\nwidth = {}\ncell_pixels = {}\nwraparound = {}\npolicy = {}",
            e.height,
            e.width,
            e.cell_pixels,
            e.wraparound,
            self.env.policy.name()
        );
        if e.walls.iter().any(|&w| w) {
            let _ = writeln!(out, "layout = {}", e.to_ascii().join("/"));
        }
        let _ = writeln!(
            out,
            "\n[data]\nrecords = {}\nlength = {}\nseed = {}",
            self.data.records, self.data.length, self.data.seed
        );
        let _ = writeln!(
            out,
            "\n[paths]\ndataset = {}\ncheckpoint = {}\noutput = {}",
            self.paths.dataset.display(),
            self.paths.checkpoint.display(),
            self.paths.output.display()
        );
        out
    }

    /// Cross-section checks; errors name the offending section.
    pub fn validate(&self) -> Result<()> {
        for (j, p) in self.cann.iter().enumerate() {
            let section = if j == 0 {
                "cann".to_string()
            } else {
                format!("cann.{j}")
            };
            p.validate()
                .map_err(|e| GcqError::config(&section, None, e.to_string()))?;
            if self.training.learnable && p.subdivision != 1 {
                return Err(GcqError::config(
                    &section,
                    Some("codewords"),
                    "a learnable codebook needs codewords = neurons",
                ));
            }
        }
        let topologies: Vec<Topology> = self.cann.iter().map(|p| p.topology).collect();
        if let Some((symbol, moves)) = self.actions.iter().find(|(_, m)| m.len() != topologies.len()) {
            return Err(GcqError::config(
                "actions",
                Some(symbol),
                format!("{} moves for {} factors", moves.len(), topologies.len()),
            ));
        }
        let map = self.action_map()?;
        for a in Action::ALL {
            if map.id(a.name()).is_err() {
                return Err(GcqError::config(
                    "actions",
                    Some(a.name()),
                    "environment action is not mapped",
                ));
            }
        }
        let latent: usize = self.cann.iter().map(|p| p.neuron_count()).sum();
        if let Some(l) = self.latent_dim {
            if l != latent {
                return Err(GcqError::config(
                    "model",
                    Some("latent_dim"),
                    format!("codebook latent width is {latent}"),
                ));
            }
        }
        if self.training.batch_size == 0 {
            return Err(GcqError::config("training", Some("batch"), "must be positive"));
        }
        if !(self.training.lr.is_finite() && self.training.lr > 0.0) {
            return Err(GcqError::config("training", Some("lr"), "must be finite and positive"));
        }
        if self.model.metric == Metric::InnerProduct && self.data.length > 1 {
            return Err(GcqError::config(
                "model",
                Some("metric"),
                "inner_product matching needs sequences of length 1",
            ));
        }
        self.env
            .maze
            .validate()
            .map_err(|e| GcqError::config("env", None, e.to_string()))?;
        if self.data.records == 0 || self.data.length == 0 {
            return Err(GcqError::config("data", None, "records and length must be positive"));
        }
        Ok(())
    }

    pub fn action_map(&self) -> Result<ActionMap> {
        let topologies: Vec<Topology> = self.cann.iter().map(|p| p.topology).collect();
        ActionMap::new(self.actions.clone(), &self.noop, &topologies)
            .map_err(|e| GcqError::config("actions", None, e.to_string()))
    }

    /// Attractor codebook; training turns it learnable when `[training] learnable` is set.
    pub fn codebook(&self) -> Result<Codebook> {
        build_codebook(&self.cann, &self.steps, self.action_map()?)
    }

    /// Applies a seed override to both training and data generation.
    pub fn override_seed(&mut self, seed: u64) {
        self.training.seed = seed;
        self.data.seed = seed;
    }
}
