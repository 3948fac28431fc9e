//! Raw samples from a configured simulator, one line per response.

use std::io::Write;

use anyhow::{bail, Result};

use wmaudit::blackbox::{BlackBox, ChoiceProbe, DiversityProbe, SemanticQuery, Simulator};
use wmaudit::rng::mix;

use crate::config::{CampaignConfig, Source};

#[derive(Clone, Debug)]
pub enum Probe {
    Diversity { length: usize, prompt_id: usize },
    Choice { prefix: String, digit: u8, repeat: usize, choices: Vec<String> },
}

pub fn simulate(cfg: &CampaignConfig, probe: &Probe, samples: usize, json: bool, out: &mut dyn Write) -> Result<()> {
    let Source::Simulator(mut sim) = cfg.source()? else {
        bail!("simulate needs a [model.simulator] table");
    };
    sim.sample_seed = mix(sim.sample_seed, cfg.seed);
    let mut model = Simulator::new(sim)?;
    let q = match probe {
        Probe::Diversity { length, prompt_id } => {
            SemanticQuery::Diversity(DiversityProbe { prompt_id: *prompt_id, target_length: *length })
        }
        Probe::Choice { prefix, digit, repeat, choices } => SemanticQuery::Choice(ChoiceProbe {
            prefix: prefix.clone(),
            digit: *digit,
            repeat: *repeat,
            choices: choices.clone(),
            perturb: None,
        }),
    };
    q.validate()?;
    for _ in 0..samples {
        let r = model.ask(&q)?;
        if json {
            serde_json::to_writer(&mut *out, &r)?;
            writeln!(out)?;
            continue;
        }
        let line = match (&q, r.parsed_choice) {
            (SemanticQuery::Choice(c), Some(i)) => c.choices[i].clone(),
            (SemanticQuery::Choice(_), None) => "<invalid>".into(),
            _ => r.content_key(r.token_count).or(r.text).unwrap_or_default(),
        };
        writeln!(out, "{line}")?;
    }
    Ok(())
}
