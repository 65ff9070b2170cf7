//! Four-part exploration prompt and its ablation modes.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{ExplorationState, ExploreError};
use crate::designspace::{DesignConfiguration, DesignSpace, PragmaKind, PragmaValue};
use crate::pareto::{ArchiveEntry, ObjectiveMode};

pub const HEADER_TASK: &str = "## Task Description";
pub const HEADER_EXAMPLES: &str = "## High-Quality Solution Examples";
pub const HEADER_INSTRUCTION: &str = "## Task Instruction";
pub const HEADER_EXEMPLARS: &str = "## Solution Generation Exemplars";

pub const NO_EXAMPLES: &str = "None yet. No configuration has been evaluated so far.";

pub const PIPELINE_RULE: &str =
    "Setting the pipeline directive to \"off\" reduces utilization such as LUTs while \
relatively increasing latency. Conversely, setting it to \"flatten\" yields the opposite effect.";

const IMPACT_RULES: [&str; 5] = [
    PIPELINE_RULE,
    "Setting a pipeline directive to \"on\" sits between the two: the loop issues a new iteration every \
initiation interval at a moderate resource cost.",
    "A larger unroll factor replicates the loop body, lowering latency while increasing LUT, FF and DSP usage.",
    "A larger array partition factor adds memory ports, lowering latency of memory-bound loops while \
increasing BRAM and LUT usage.",
    "A larger tile factor buffers more data on chip, lowering memory stalls while increasing BRAM, LUT and FF usage.",
];

const BACKGROUND: &str = "You are optimizing the pragma configuration of a high-level synthesis kernel. Each \
directive below is inserted into the C/C++ source before synthesis and changes the quality of results: the \
latency in clock cycles and the usage of LUT, DSP, FF and BRAM resources. Both latency and resource \
utilization are to be minimized, so the goal is a set of Pareto-optimal configurations. A configuration is \
infeasible when any resource exceeds the capacity of the target FPGA.";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    #[default]
    Peodse,
    ZeroShot,
    FewShot,
    InstructionOnly,
}

impl PromptMode {
    fn has_examples(self) -> bool {
        matches!(self, PromptMode::Peodse | PromptMode::FewShot)
    }

    fn has_instruction(self) -> bool {
        matches!(self, PromptMode::Peodse | PromptMode::InstructionOnly)
    }

    fn has_exemplars(self) -> bool {
        self == PromptMode::Peodse
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptOptions {
    pub kernel: String,
    pub k: usize,
    pub batch: usize,
    pub mode: PromptMode,
    pub objective: ObjectiveMode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeodsePrompt {
    pub mode: PromptMode,
    pub task_description: String,
    pub examples: String,
    pub task_instruction: String,
    pub generation_exemplars: String,
    pub request: String,
}

impl PeodsePrompt {
    /// The text sent to the model. Sections outside the mode are omitted;
    /// the request always closes the prompt.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut section = |header: &str, body: &str| {
            out.push_str(header);
            out.push_str("\n\n");
            out.push_str(body.trim_end());
            out.push_str("\n\n");
        };
        section(HEADER_TASK, &self.task_description);
        if self.mode.has_examples() {
            section(HEADER_EXAMPLES, &self.examples);
        }
        if self.mode.has_instruction() {
            section(HEADER_INSTRUCTION, &self.task_instruction);
        }
        if self.mode.has_exemplars() {
            section(HEADER_EXEMPLARS, &self.generation_exemplars);
        }
        out.push_str(self.request.trim_end());
        out.push('\n');
        out
    }
}

/// Archive members ordered by largest utilization, then latency, then
/// configuration.
pub fn ranked_examples(entries: &[ArchiveEntry], k: usize) -> Vec<&ArchiveEntry> {
    let key = |e: &ArchiveEntry| {
        let util = e.objectives[1..].iter().copied().fold(0.0, f64::max);
        (util, e.objectives[0])
    };
    let mut v: Vec<&ArchiveEntry> = entries.iter().collect();
    v.sort_by(|a, b| {
        key(a)
            .partial_cmp(&key(b))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.config.cmp(&b.config))
    });
    v.truncate(k);
    v
}

fn format_objectives(obj: &[f64], mode: ObjectiveMode) -> String {
    mode.names()
        .iter()
        .zip(obj)
        .map(|(n, v)| match *n {
            "latency" => format!("latency={v:.0} cycles"),
            _ => format!("{n}={:.2}%", v * 100.0),
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn domain_text(values: &[PragmaValue]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

fn kind_text(kind: PragmaKind, target: &str) -> String {
    match kind {
        PragmaKind::Pipeline => format!("pipeline of loop {target}"),
        PragmaKind::Unroll => format!("unroll factor of loop {target}"),
        PragmaKind::ArrayPartition => format!("cyclic partition factor of array {target}"),
        PragmaKind::Tile => format!("tile factor of loop {target}"),
    }
}

fn block(space: &DesignSpace, cfg: &DesignConfiguration) -> String {
    space
        .values(cfg)
        .map(|(d, v)| format!("{}={}", d.name, v))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Walks one step from the best example (or the default configuration) by
/// raising the first factor directive that still has headroom.
fn exemplar(space: &DesignSpace, start: &DesignConfiguration, start_obj: Option<String>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Example of a step-by-step derivation.");
    let _ = writeln!(
        s,
        "Step 1: Start from the configuration `{}`.",
        space.config_key(start)
    );
    match start_obj {
        Some(o) => {
            let _ = writeln!(
                s,
                "Step 2: It achieves {o}. Latency dominates, so trade some resources for speed."
            );
        }
        None => {
            let _ = writeln!(
                s,
                "Step 2: Nothing is known about it yet. All directives are at their lowest setting, so latency is high and utilization is low."
            );
        }
    }
    let mut next = start.indices().to_vec();
    let mut step = None;
    for (i, d) in space.directives.iter().enumerate() {
        if d.kind != PragmaKind::Pipeline && next[i] + 1 < d.domain.len() {
            next[i] += 1;
            step = Some((d.name.clone(), d.domain[next[i] - 1], d.domain[next[i]]));
            break;
        }
    }
    match step {
        Some((name, from, to)) => {
            let _ = writeln!(
                s,
                "Step 3: Raise {name} from {from} to {to}. A larger factor shortens the loop at a moderate resource cost."
            );
        }
        None => {
            let _ = writeln!(
                s,
                "Step 3: Every factor is at its maximum, so change a pipeline directive instead."
            );
            if let Some(i) = space.directives.iter().position(|d| d.domain.len() > 1) {
                next[i] = (next[i] + 1) % space.directives[i].domain.len();
            }
        }
    }
    let _ = writeln!(
        s,
        "Step 4: Keep every other directive unchanged so that the effect of the change can be attributed."
    );
    let _ = writeln!(s, "Step 5: Write the resulting configuration:");
    let _ = writeln!(s, "```");
    let _ = writeln!(
        s,
        "{}",
        block(space, &DesignConfiguration::from_indices(next))
    );
    let _ = write!(s, "```");
    s
}

/// Builds the prompt for the next round. Deterministic in its inputs.
pub fn build_prompt(
    state: &ExplorationState,
    space: &DesignSpace,
    opts: &PromptOptions,
) -> Result<PeodsePrompt, ExploreError> {
    if space.is_empty() {
        return Err(ExploreError::Config(
            "design space has no directives".into(),
        ));
    }
    if opts.k == 0 || opts.batch == 0 {
        return Err(ExploreError::Config(
            "k and the batch size must be at least 1".into(),
        ));
    }

    let mut task = String::new();
    let _ = writeln!(task, "{BACKGROUND}");
    let _ = writeln!(task);
    let _ = writeln!(task, "Kernel: {}", opts.kernel);
    let _ = writeln!(task, "Directives and their allowed values:");
    for d in &space.directives {
        let _ = writeln!(
            task,
            "- {} ({}): {{{}}}",
            d.name,
            kind_text(d.kind, &d.target),
            domain_text(&d.domain)
        );
    }
    let _ = writeln!(task);
    let _ = writeln!(task, "Impact of the directives on the quality of results:");
    for r in IMPACT_RULES {
        let _ = writeln!(task, "- {r}");
    }

    let ranked = ranked_examples(state.archive.entries(), opts.k);
    let examples = if ranked.is_empty() {
        NO_EXAMPLES.to_string()
    } else {
        let mut s = String::from(
            "The best configurations found so far, all mutually non-dominated, ordered by utilization then latency:\n",
        );
        for (i, e) in ranked.iter().enumerate() {
            let _ = writeln!(
                s,
                "{}. `{}` -> {}",
                i + 1,
                space.config_key(&e.config),
                format_objectives(&e.objectives, opts.objective)
            );
        }
        s
    };

    let mut instruction = String::new();
    let _ = writeln!(
        instruction,
        "Generate new configurations that are likely to be Pareto-optimal. Use the examples as starting points and change one or two directives at a time."
    );
    let _ = writeln!(instruction, "Follow these rules about pragma impact:");
    for r in IMPACT_RULES {
        let _ = writeln!(instruction, "- {r}");
    }
    let _ = writeln!(
        instruction,
        "- Do not repeat a configuration that is already listed as an example."
    );
    let _ = writeln!(
        instruction,
        "- Use only the directive names and values listed in the task description."
    );

    let generation_exemplars = match ranked.first() {
        Some(e) => exemplar(
            space,
            &e.config,
            Some(format_objectives(&e.objectives, opts.objective)),
        ),
        None => exemplar(
            space,
            &DesignConfiguration::from_indices(vec![0; space.len()]),
            None,
        ),
    };

    let request = format!(
        "Propose exactly {} new configurations. Write them inside a single fenced code block delimited by ``` lines. \
Write each configuration as one `name=value` line per directive, assigning every directive exactly once, and \
separate configurations with a blank line.",
        opts.batch
    );

    Ok(PeodsePrompt {
        mode: opts.mode,
        task_description: task,
        examples,
        task_instruction: instruction,
        generation_exemplars,
        request,
    })
}

/// Configurations quoted in the examples section of a rendered prompt.
pub fn example_configs(prompt: &str, space: &DesignSpace) -> Vec<DesignConfiguration> {
    let Some(start) = prompt.find(HEADER_EXAMPLES) else {
        return Vec::new();
    };
    let rest = &prompt[start + HEADER_EXAMPLES.len()..];
    let section = rest.find("\n## ").map_or(rest, |end| &rest[..end]);
    section
        .lines()
        .filter_map(|line| {
            let open = line.find('`')?;
            let close = open + 1 + line[open + 1..].find('`')?;
            let pairs = super::parse::parse_pairs(line[open + 1..close].split(',')).ok()?;
            space.config_from_values(&pairs).ok()
        })
        .collect()
}

/// The batch size demanded by a rendered prompt.
pub fn requested_batch(prompt: &str) -> Option<usize> {
    let i = prompt.rfind("Propose exactly ")?;
    prompt[i + "Propose exactly ".len()..]
        .split_whitespace()
        .next()?
        .parse()
        .ok()
}
