//! Three experiments edit the same file in separate worktrees. Only the
//! promoted one reaches the main branch.

use autoresearch::patch::Edit;
use autoresearch::repo::RepoHandle;
use autoresearch::testbed::{init_mock_target, TRAIN_SCRIPT};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let root = init_mock_target(dir.path().join("target"), 0.0)?;
    let repo = RepoHandle::open(&root, "main", Some(dir.path().join("scratch")))?;
    let base = repo.baseline_commit()?;

    let mut trees = Vec::new();
    for (k, depth) in ["6", "10", "12"].iter().enumerate() {
        let w = repo.create_worktree(&base, &format!("demo/worker-{}", k + 1))?;
        w.apply(&[Edit::new(
            TRAIN_SCRIPT,
            "DEPTH=8\n",
            format!("DEPTH={depth}\n"),
        )?])?;
        println!(
            "worker-{} at {} changed {:?}",
            k + 1,
            w.path.display(),
            w.changed_files()?
        );
        trees.push(w);
    }

    let promoted = repo.promote(&trees[1], "round 1: deeper model")?;
    println!(
        "main -> {promoted} ({})",
        repo.commit_message(&promoted)?.trim()
    );
    let on_main = std::fs::read_to_string(root.join(TRAIN_SCRIPT))?;
    println!(
        "main checkout now reads {}",
        on_main.lines().find(|l| l.starts_with("DEPTH")).unwrap()
    );

    for w in &trees {
        repo.destroy_worktree(w);
    }
    println!(
        "live worktrees after cleanup: {}",
        repo.live_worktrees().len()
    );
    Ok(())
}
