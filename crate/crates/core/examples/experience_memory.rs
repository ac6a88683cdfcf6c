//! Appends outcomes to an experience memory file and renders the bounded
//! context block that gets injected into the next prompt.

use autoresearch::config::Topology;
use autoresearch::memory::{ExperienceRecord, MemoryFile, MemoryKind, Outcome};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let memory = MemoryFile::create(dir.path(), MemoryKind::Experience, None)?;

    let mut best = 1.35;
    for (round, (idea, metric)) in [
        ("lower lr", 1.31),
        ("wider mlp", 1.33),
        ("longer warmdown", 1.29),
    ]
    .into_iter()
    .enumerate()
    {
        let outcome = if metric < best {
            Outcome::Success
        } else {
            Outcome::Failed
        };
        memory.record(&ExperienceRecord {
            round: round as u32 + 1,
            topology: Topology::Single,
            source: "worker".into(),
            idea_summary: idea.into(),
            outcome,
            metric_before: Some(best),
            metric_after: Some(metric),
            timestamp: chrono::Utc::now(),
        })?;
        best = best.min(metric);
    }

    println!("{}", std::fs::read_to_string(memory.path())?);
    println!("--- last two entries as prompt context ---");
    println!("{}", memory.render_context(2, 4000)?);
    Ok(())
}
