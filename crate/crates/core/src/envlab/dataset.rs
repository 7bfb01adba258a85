use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mdp::{Mdp, Policy};
use crate::error::{ensure, Error, Result};

/// Rollouts are reset after this many steps without reaching a terminal.
pub const EPISODE_CAP: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub terminal: bool,
}

/// Episode-ordered offline data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub transitions: Vec<Transition>,
    /// Index of the first transition of each episode, ascending, starting at 0.
    pub episode_starts: Vec<usize>,
    pub provenance: Policy,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Half-open index ranges of the episodes.
    pub fn episodes(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::with_capacity(self.episode_starts.len());
        for (i, &start) in self.episode_starts.iter().enumerate() {
            let end = self.episode_starts.get(i + 1).copied().unwrap_or(self.transitions.len());
            out.push(start..end);
        }
        out
    }

    /// Action taken after each transition within its episode (the SARSA action), if any.
    pub fn next_actions(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.len()];
        for ep in self.episodes() {
            let tr = &self.transitions[ep.clone()];
            for (slot, pair) in out[ep].iter_mut().zip(tr.windows(2)) {
                if !pair[0].terminal {
                    *slot = Some(pair[1].action);
                }
            }
        }
        out
    }

    pub fn validate(&self, mdp: &Mdp) -> Result<()> {
        ensure(!self.transitions.is_empty(), || "dataset is empty".into())?;
        ensure(self.episode_starts.first() == Some(&0), || "first episode must start at 0".into())?;
        ensure(self.episode_starts.windows(2).all(|w| w[0] < w[1]), || "episode starts must increase".into())?;
        ensure(*self.episode_starts.last().unwrap() < self.len(), || "episode start past end".into())?;
        for (i, t) in self.transitions.iter().enumerate() {
            ensure(t.state < mdp.n_states() && t.next_state < mdp.n_states(), || format!("transition {i}: state out of range"))?;
            ensure(t.action < mdp.n_actions(), || format!("transition {i}: action out of range"))?;
            ensure(t.reward.is_finite(), || format!("transition {i}: reward not finite"))?;
            ensure(t.terminal == mdp.is_terminal(t.next_state), || format!("transition {i}: terminal flag inconsistent"))?;
        }
        Ok(())
    }

    /// Writes the JSON header line followed by one `s,a,r,s',terminal` row per transition.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: 1,
            seed: self.seed,
            n_transitions: self.len(),
            episode_starts: self.episode_starts.clone(),
            policy: self.provenance.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for t in &self.transitions {
            writeln!(w, "{},{},{},{},{}", t.state, t.action, t.reward, t.next_state, u8::from(t.terminal))?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let first = lines.next().ok_or_else(|| Error::Format("missing dataset header".into()))??;
        let header: DatasetHeader = serde_json::from_str(&first)?;
        if header.format != DATASET_FORMAT || header.version != 1 {
            return Err(Error::Format(format!("unsupported dataset format {} v{}", header.format, header.version)));
        }
        let mut transitions = Vec::with_capacity(header.n_transitions);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(Error::Format(format!("row {}: expected 5 columns", lineno + 1)));
            }
            let bad = |what: &str| Error::Format(format!("row {}: bad {what}", lineno + 1));
            transitions.push(Transition {
                state: cols[0].parse().map_err(|_| bad("state"))?,
                action: cols[1].parse().map_err(|_| bad("action"))?,
                reward: cols[2].parse().map_err(|_| bad("reward"))?,
                next_state: cols[3].parse().map_err(|_| bad("next state"))?,
                terminal: match cols[4] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad("terminal flag")),
                },
            });
        }
        if transitions.len() != header.n_transitions {
            return Err(Error::Format(format!(
                "header declares {} transitions, found {}",
                header.n_transitions,
                transitions.len()
            )));
        }
        Ok(Self { transitions, episode_starts: header.episode_starts, provenance: header.policy, seed: header.seed })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

const DATASET_FORMAT: &str = "flowtd-dataset";

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    seed: u64,
    n_transitions: usize,
    episode_starts: Vec<usize>,
    policy: Policy,
}

/// Rolls out `policy` from the start state, resetting at terminals and after
/// [`EPISODE_CAP`] steps.
pub fn collect_dataset(mdp: &Mdp, policy: &Policy, n_transitions: usize, seed: u64) -> Result<Dataset> {
    ensure(n_transitions >= 1, || "need at least one transition".into())?;
    policy.check_matches(mdp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::with_capacity(n_transitions);
    let mut episode_starts = vec![0];
    let mut s = mdp.start_state();
    let mut steps = 0;
    while transitions.len() < n_transitions {
        let a = policy.sample(s, &mut rng);
        let next = mdp.sample_next(s, a, &mut rng);
        let reward = mdp.sample_reward(s, a, &mut rng);
        let terminal = mdp.is_terminal(next);
        transitions.push(Transition { state: s, action: a, reward, next_state: next, terminal });
        steps += 1;
        if terminal || steps == EPISODE_CAP {
            s = mdp.start_state();
            steps = 0;
            if transitions.len() < n_transitions {
                episode_starts.push(transitions.len());
            }
        } else {
            s = next;
        }
    }
    Ok(Dataset { transitions, episode_starts, provenance: policy.clone(), seed })
}

/// Discounted return-to-go for every transition.
#[derive(Debug, Clone, PartialEq)]
pub struct McReturns {
    pub returns: Vec<f64>,
    /// Episodes (by index into `Dataset::episodes`) that end without a terminal
    /// transition. Their returns are bootstrapped with 0.
    pub truncated_episodes: Vec<usize>,
}

impl McReturns {
    pub fn final_episode_truncated(&self, dataset: &Dataset) -> bool {
        self.truncated_episodes.last() == Some(&(dataset.episode_starts.len() - 1))
    }
}

pub fn mc_returns(dataset: &Dataset, gamma: f64) -> Result<McReturns> {
    ensure((0.0..=1.0).contains(&gamma), || format!("gamma {gamma} not in [0, 1]"))?;
    ensure(!dataset.is_empty(), || "dataset is empty".into())?;
    let mut returns = vec![0.0; dataset.len()];
    let mut truncated_episodes = Vec::new();
    for (e, ep) in dataset.episodes().into_iter().enumerate() {
        if !dataset.transitions[ep.end - 1].terminal {
            truncated_episodes.push(e);
        }
        let mut g = 0.0;
        for i in ep.rev() {
            g = dataset.transitions[i].reward + gamma * g;
            returns[i] = g;
        }
    }
    Ok(McReturns { returns, truncated_episodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envlab::mdp::{build_chain, RIGHT};

    fn episode(rewards: &[f64]) -> Dataset {
        let n = rewards.len();
        let transitions = rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| Transition { state: i, action: RIGHT, reward: r, next_state: i + 1, terminal: i + 1 == n })
            .collect();
        let mdp = build_chain(n + 1, 0.0, 1.0).unwrap();
        Dataset { transitions, episode_starts: vec![0], provenance: Policy::uniform(&mdp), seed: 0 }
    }

    #[test]
    fn mc_returns_direct_sum() {
        let ds = episode(&[0.0, 0.0, 1.0]);
        let mc = mc_returns(&ds, 0.5).unwrap();
        assert_eq!(mc.returns, vec![0.25, 0.5, 1.0]);
        assert!(mc.truncated_episodes.is_empty());
        let mc0 = mc_returns(&ds, 0.0).unwrap();
        assert_eq!(mc0.returns, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn truncated_final_episode_is_flagged() {
        let mdp = build_chain(30, 0.0, 1.0).unwrap();
        let ds = collect_dataset(&mdp, &Policy::uniform(&mdp), 7, 3).unwrap();
        let mc = mc_returns(&ds, 0.9).unwrap();
        assert!(mc.final_episode_truncated(&ds));
    }

    #[test]
    fn single_transition_deterministic() {
        let mdp = build_chain(4, 0.0, 1.0).unwrap();
        let pi = Policy::deterministic(&mdp, &[RIGHT; 4]).unwrap();
        let ds = collect_dataset(&mdp, &pi, 1, 11).unwrap();
        assert_eq!(ds.transitions, vec![Transition { state: 0, action: RIGHT, reward: 0.0, next_state: 1, terminal: false }]);
    }

    #[test]
    fn episodes_reset_at_terminal() {
        let mdp = build_chain(3, 0.0, 1.0).unwrap();
        let pi = Policy::deterministic(&mdp, &[RIGHT; 3]).unwrap();
        let ds = collect_dataset(&mdp, &pi, 5, 0).unwrap();
        assert_eq!(ds.episode_starts, vec![0, 2, 4]);
        assert_eq!(ds.next_actions(), vec![Some(RIGHT), None, Some(RIGHT), None, None]);
        ds.validate(&mdp).unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mdp = build_chain(5, 0.2, 1.0).unwrap();
        let ds = collect_dataset(&mdp, &Policy::uniform(&mdp), 300, 9).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1).unwrap().split(',').count(), 5);
    }

    #[test]
    fn read_rejects_wrong_count() {
        let mdp = build_chain(5, 0.2, 1.0).unwrap();
        let ds = collect_dataset(&mdp, &Policy::uniform(&mdp), 3, 9).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        buf.extend_from_slice(b"0,0,0,0,0\n");
        assert!(Dataset::read_from(buf.as_slice()).is_err());
    }
}
