use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use preftree::answer::canonical_answer;
use preftree::rerank::{pass_at_n_rate, rerank, rerank_accuracy, self_consistency};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::{io, Cli, CliError, Format, Status};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// `{"instruction_id", "candidate_id", "correct", "answer"?}` per line, in sampling order.
    #[arg(long)]
    pub candidates: PathBuf,
    /// `{"instruction_id", "candidate_id", "reward"}` per line.
    #[arg(long)]
    pub rewards: PathBuf,
    /// Pool sizes to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    pub n: Vec<usize>,
    /// Winner per instruction over the full pool (JSONL).
    #[arg(long)]
    pub winners: Option<PathBuf>,
    #[arg(long, default_value = "-")]
    pub output: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Candidate {
    instruction_id: String,
    candidate_id: String,
    correct: bool,
    #[serde(default)]
    answer: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Reward {
    instruction_id: String,
    candidate_id: String,
    reward: f64,
}

#[derive(Debug, Serialize)]
struct Winner<'a> {
    instruction_id: &'a str,
    candidate_id: &'a str,
    reward: f64,
    correct: bool,
}

#[derive(Debug, Serialize)]
struct Row {
    n: usize,
    pass_at_n: f64,
    rerank: f64,
    self_consistency: Option<f64>,
}

struct Pool<'a> {
    id: &'a str,
    members: Vec<(&'a Candidate, f64)>,
}

fn pools<'a>(cands: &'a [Candidate], rewards: &[Reward]) -> Result<Vec<Pool<'a>>, CliError> {
    let mut by_key: HashMap<(&str, &str), f64> = HashMap::new();
    for r in rewards {
        if by_key.insert((&r.instruction_id, &r.candidate_id), r.reward).is_some() {
            return Err(CliError::Input(format!("duplicate reward for {}/{}", r.instruction_id, r.candidate_id)));
        }
    }
    let mut seen = HashSet::new();
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<(&Candidate, f64)>> = HashMap::new();
    for c in cands {
        let key = (c.instruction_id.as_str(), c.candidate_id.as_str());
        if !seen.insert(key) {
            return Err(CliError::Input(format!("duplicate candidate {}/{}", key.0, key.1)));
        }
        let reward =
            *by_key.get(&key).ok_or_else(|| CliError::Input(format!("no reward for candidate {}/{}", key.0, key.1)))?;
        groups.entry(key.0).or_insert_with(|| {
            order.push(key.0);
            Vec::new()
        });
        groups.get_mut(key.0).expect("inserted").push((c, reward));
    }
    if let Some((i, c)) = by_key.keys().find(|k| !seen.contains(*k)) {
        return Err(CliError::Input(format!("reward for unknown candidate {i}/{c}")));
    }
    Ok(order.into_iter().map(|id| Pool { id, members: groups.remove(id).unwrap_or_default() }).collect())
}

/// Correctness of the majority answer among the first `n`, judged by the
/// first candidate carrying it.
fn majority_correct(pool: &Pool, n: usize) -> Option<bool> {
    let head: Vec<&Candidate> = pool.members.iter().take(n).map(|(c, _)| *c).collect();
    let answers: Vec<&str> = head.iter().map(|c| c.answer.as_deref()).collect::<Option<_>>()?;
    let winner = canonical_answer(&self_consistency(&answers)?);
    head.iter().find(|c| c.answer.as_deref().map(canonical_answer) == Some(winner.clone())).map(|c| c.correct)
}

pub fn run(cli: &Cli, _cfg: &PipelineConfig, args: &Args) -> Result<Status, CliError> {
    if args.n.is_empty() || args.n.contains(&0) {
        return Err(CliError::Usage("--n values must be positive".into()));
    }
    let cands: Vec<Candidate> = io::read_jsonl(&args.candidates)?;
    let rewards: Vec<Reward> = io::read_jsonl(&args.rewards)?;
    let pools = pools(&cands, &rewards)?;
    if cli.dry_run {
        log::info!("{} instructions, {} candidates", pools.len(), cands.len());
        return Ok(Status::Clean);
    }

    let flags: Vec<Vec<bool>> = pools.iter().map(|p| p.members.iter().map(|(c, _)| c.correct).collect()).collect();
    let scored: Vec<Vec<(bool, f64)>> =
        pools.iter().map(|p| p.members.iter().map(|(c, r)| (c.correct, *r)).collect()).collect();
    let rows: Vec<Row> = args
        .n
        .iter()
        .map(|&n| {
            let sc: Option<Vec<bool>> = pools.iter().map(|p| majority_correct(p, n)).collect();
            Row {
                n,
                pass_at_n: pass_at_n_rate(&flags, n),
                rerank: rerank_accuracy(&scored, n),
                self_consistency: sc.filter(|v| !v.is_empty()).map(|v| {
                    v.iter().filter(|b| **b).count() as f64 / v.len() as f64
                }),
            }
        })
        .collect();

    if let Some(path) = &args.winners {
        let winners: Vec<Winner> = pools
            .iter()
            .filter_map(|p| {
                let indexed: Vec<(usize, f64)> = p.members.iter().enumerate().map(|(i, (_, r))| (i, *r)).collect();
                let (c, r) = p.members[rerank(&indexed)?];
                Some(Winner { instruction_id: p.id, candidate_id: &c.candidate_id, reward: r, correct: c.correct })
            })
            .collect();
        preftree::pairs::write_jsonl(&winners, io::create_output(path, false)?)
            .map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
    }

    let text = match cli.format {
        Format::Json => serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n",
        Format::Table => {
            let mut s = format!("{:>4} {:>9} {:>9} {:>16}\n", "N", "pass@N", "rerank", "self-consistency");
            for r in &rows {
                let sc = r.self_consistency.map_or("-".to_string(), |v| format!("{v:.4}"));
                s.push_str(&format!("{:>4} {:>9.4} {:>9.4} {:>16}\n", r.n, r.pass_at_n, r.rerank, sc));
            }
            s
        }
    };
    io::write_text(&args.output, &text)?;
    Ok(Status::Clean)
}
