//! Git worktree isolation.
//!
//! Every candidate is edited and evaluated in its own worktree checked out at
//! the round's baseline commit. The main branch only moves through
//! [`RepoHandle::promote`], which commits a worktree's tree on top of the
//! baseline and refuses to run when the baseline has gone stale.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::patch::{apply_edits, ApplyError, Edit};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CommitId(pub String);

impl fmt::Display for CommitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TreeHash(pub String);

impl fmt::Display for TreeHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RepoError {
    #[error("`git {args}` failed: {stderr}")]
    Git { args: String, stderr: String },
    #[error("running git: {0}")]
    Spawn(#[source] std::io::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0} is not a git repository with a `{1}` branch")]
    NotARepository(PathBuf, String),
    #[error("unknown commit `{0}`")]
    UnknownCommit(String),
    #[error("stale baseline: worktree branched from {expected}, main is at {actual}")]
    StaleBaseline {
        expected: CommitId,
        actual: CommitId,
    },
    #[error("{0} is not valid UTF-8")]
    NotUtf8(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RepoError + '_ {
    move |source| RepoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

const AUTHOR: &str = "autoresearch";
const AUTHOR_EMAIL: &str = "autoresearch@localhost";

fn git_cmd(dir: &Path) -> Command {
    let mut cmd = Command::new("git");
    cmd.arg("-C")
        .arg(dir)
        .env("GIT_TERMINAL_PROMPT", "0")
        .env("GIT_AUTHOR_NAME", AUTHOR)
        .env("GIT_AUTHOR_EMAIL", AUTHOR_EMAIL)
        .env("GIT_COMMITTER_NAME", AUTHOR)
        .env("GIT_COMMITTER_EMAIL", AUTHOR_EMAIL);
    cmd
}

fn run_git(mut cmd: Command, args: &[&str]) -> Result<String, RepoError> {
    let out = cmd.args(args).output().map_err(RepoError::Spawn)?;
    if !out.status.success() {
        return Err(RepoError::Git {
            args: args.join(" "),
            stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        });
    }
    Ok(String::from_utf8_lossy(&out.stdout).trim_end().to_string())
}

/// Runs `git -C dir args...` and returns trimmed stdout.
pub fn git(dir: &Path, args: &[&str]) -> Result<String, RepoError> {
    run_git(git_cmd(dir), args)
}

/// Tree hash of a directory's working state, untracked files included,
/// computed through a scratch index so the real index is not touched.
fn working_tree_hash(dir: &Path) -> Result<TreeHash, RepoError> {
    let index = git(dir, &["rev-parse", "--git-path", "autoresearch-index"])?;
    let index = {
        let p = PathBuf::from(&index);
        if p.is_absolute() {
            p
        } else {
            dir.join(p)
        }
    };
    let _ = std::fs::remove_file(&index);
    let with_index = || {
        let mut cmd = git_cmd(dir);
        cmd.env("GIT_INDEX_FILE", &index);
        cmd
    };
    run_git(with_index(), &["read-tree", "HEAD"])?;
    run_git(with_index(), &["add", "-A", "."])?;
    let tree = run_git(with_index(), &["write-tree"])?;
    let _ = std::fs::remove_file(&index);
    Ok(TreeHash(tree))
}

/// The target repository plus the scratch area its worktrees live in.
#[derive(Debug, Clone)]
pub struct RepoHandle {
    root: PathBuf,
    main_branch: String,
    scratch: PathBuf,
    promote_lock: Arc<Mutex<()>>,
    // git does not lock `.git/worktrees/`; a prune can eat a half-made add
    admin_lock: Arc<Mutex<()>>,
    live: Arc<Mutex<BTreeSet<PathBuf>>>,
}

impl RepoHandle {
    pub fn open(
        root: impl AsRef<Path>,
        main_branch: &str,
        scratch: Option<PathBuf>,
    ) -> Result<Self, RepoError> {
        let root = root.as_ref();
        let root = std::fs::canonicalize(root).map_err(io_err(root))?;
        let spec = format!("refs/heads/{main_branch}^{{commit}}");
        if git(&root, &["rev-parse", "--verify", "--quiet", &spec]).is_err() {
            return Err(RepoError::NotARepository(root, main_branch.to_string()));
        }
        let toplevel = PathBuf::from(git(&root, &["rev-parse", "--show-toplevel"])?);
        let scratch = match scratch {
            Some(s) => s,
            None => {
                let name = toplevel
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "repo".into());
                toplevel
                    .parent()
                    .unwrap_or(&toplevel)
                    .join(format!(".{name}-worktrees"))
            }
        };
        Ok(Self {
            root: toplevel,
            main_branch: main_branch.to_string(),
            scratch,
            promote_lock: Arc::new(Mutex::new(())),
            admin_lock: Arc::new(Mutex::new(())),
            live: Arc::new(Mutex::new(BTreeSet::new())),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn main_branch(&self) -> &str {
        &self.main_branch
    }

    pub fn scratch_dir(&self) -> &Path {
        &self.scratch
    }

    fn main_ref(&self) -> String {
        format!("refs/heads/{}", self.main_branch)
    }

    /// Tip of the main branch.
    pub fn baseline_commit(&self) -> Result<CommitId, RepoError> {
        let spec = format!("{}^{{commit}}", self.main_ref());
        git(&self.root, &["rev-parse", "--verify", &spec]).map(CommitId)
    }

    pub fn tree_of(&self, commit: &CommitId) -> Result<TreeHash, RepoError> {
        let spec = format!("{}^{{tree}}", commit.0);
        git(&self.root, &["rev-parse", "--verify", "--quiet", &spec])
            .map(TreeHash)
            .map_err(|_| RepoError::UnknownCommit(commit.0.clone()))
    }

    pub fn commit_message(&self, commit: &CommitId) -> Result<String, RepoError> {
        git(&self.root, &["log", "-1", "--format=%B", &commit.0])
    }

    pub fn resolve_commit(&self, rev: &str) -> Result<CommitId, RepoError> {
        let spec = format!("{rev}^{{commit}}");
        git(&self.root, &["rev-parse", "--verify", "--quiet", &spec])
            .map(CommitId)
            .map_err(|_| RepoError::UnknownCommit(rev.to_string()))
    }

    /// Materializes a detached worktree at `commit` under `<scratch>/<id>`.
    pub fn create_worktree(
        &self,
        commit: &CommitId,
        id: &str,
    ) -> Result<WorktreeHandle, RepoError> {
        let commit = self.resolve_commit(&commit.0)?;
        let path = self.scratch.join(id);
        if path.exists() {
            log::warn!("removing leftover worktree directory {}", path.display());
            self.remove_worktree_path(&path);
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let path_str = path.to_string_lossy().into_owned();
        {
            let _admin = self.admin_lock.lock().unwrap();
            git(
                &self.root,
                &[
                    "worktree", "add", "--detach", "--quiet", &path_str, &commit.0,
                ],
            )?;
        }
        let path = std::fs::canonicalize(&path).map_err(io_err(&path))?;
        self.live.lock().unwrap().insert(path.clone());
        Ok(WorktreeHandle {
            id: id.to_string(),
            path,
            baseline_commit: commit,
        })
    }

    /// Commits `w`'s current tree as the new tip of the main branch.
    ///
    /// Calls are serialized per repository. Fails with `StaleBaseline` when
    /// main moved since `w` was created.
    pub fn promote(&self, w: &WorktreeHandle, message: &str) -> Result<CommitId, RepoError> {
        let _guard = self.promote_lock.lock().unwrap();
        let current = self.baseline_commit()?;
        if current != w.baseline_commit {
            return Err(RepoError::StaleBaseline {
                expected: w.baseline_commit.clone(),
                actual: current,
            });
        }
        let tree = w.tree_hash()?;
        let new = self.commit_tree(&tree, &current, message)?;
        git(
            &self.root,
            &["update-ref", &self.main_ref(), &new.0, &current.0],
        )?;
        self.sync_main_checkout(&current, &new);
        Ok(new)
    }

    /// Writes a commit object for `tree` on top of `parent` without moving
    /// any ref. Dates derive from the parent so identical histories hash
    /// identically.
    pub fn commit_tree(
        &self,
        tree: &TreeHash,
        parent: &CommitId,
        message: &str,
    ) -> Result<CommitId, RepoError> {
        let parent_time: i64 = git(&self.root, &["show", "-s", "--format=%ct", &parent.0])?
            .trim()
            .parse()
            .unwrap_or(0);
        let date = format!("@{} +0000", parent_time + 1);
        let mut cmd = git_cmd(&self.root);
        cmd.env("GIT_AUTHOR_DATE", &date)
            .env("GIT_COMMITTER_DATE", &date);
        Ok(CommitId(run_git(
            cmd,
            &["commit-tree", &tree.0, "-p", &parent.0, "-m", message],
        )?))
    }

    /// Brings the primary checkout along when it has the main branch checked out.
    fn sync_main_checkout(&self, old: &CommitId, new: &CommitId) {
        let head = git(&self.root, &["symbolic-ref", "--quiet", "HEAD"]).unwrap_or_default();
        if head != self.main_ref() {
            return;
        }
        if let Err(e) = git(&self.root, &["read-tree", "-m", "-u", &old.0, &new.0]) {
            log::warn!("main checkout not updated after promote: {e}");
        }
    }

    /// Removes the worktree directory and its registration. Idempotent and
    /// best-effort: problems are logged, never returned.
    pub fn destroy_worktree(&self, w: &WorktreeHandle) {
        self.remove_worktree_path(&w.path);
        self.live.lock().unwrap().remove(&w.path);
    }

    fn remove_worktree_path(&self, path: &Path) {
        let _admin = self.admin_lock.lock().unwrap();
        let path_str = path.to_string_lossy().into_owned();
        if path.exists() {
            if let Err(e) = git(&self.root, &["worktree", "remove", "--force", &path_str]) {
                log::debug!("git worktree remove {path_str}: {e}");
            }
        }
        if path.exists() {
            if let Err(e) = std::fs::remove_dir_all(path) {
                log::warn!("removing {path_str}: {e}");
            }
        }
        if let Err(e) = git(&self.root, &["worktree", "prune"]) {
            log::warn!("git worktree prune: {e}");
        }
    }

    pub fn live_worktrees(&self) -> Vec<PathBuf> {
        self.live.lock().unwrap().iter().cloned().collect()
    }

    /// Destroys every worktree this handle created and has not yet destroyed.
    pub fn cleanup(&self) {
        let paths: Vec<PathBuf> = std::mem::take(&mut *self.live.lock().unwrap())
            .into_iter()
            .collect();
        for p in paths {
            self.remove_worktree_path(&p);
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EditError {
    #[error(transparent)]
    Apply(#[from] ApplyError),
    #[error(transparent)]
    Repo(#[from] RepoError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorktreeHandle {
    pub id: String,
    pub path: PathBuf,
    pub baseline_commit: CommitId,
}

impl WorktreeHandle {
    /// Tree hash of the current working state, uncommitted edits included.
    pub fn tree_hash(&self) -> Result<TreeHash, RepoError> {
        working_tree_hash(&self.path)
    }

    /// Files that differ from the baseline commit, untracked ones included.
    pub fn changed_files(&self) -> Result<Vec<String>, RepoError> {
        let mut files: BTreeSet<String> = BTreeSet::new();
        let diff = git(
            &self.path,
            &[
                "diff",
                "--name-only",
                "--no-renames",
                &self.baseline_commit.0,
            ],
        )?;
        files.extend(diff.lines().map(str::to_string));
        let untracked = git(&self.path, &["ls-files", "--others", "--exclude-standard"])?;
        files.extend(untracked.lines().map(str::to_string));
        files.retain(|f| !f.is_empty());
        Ok(files.into_iter().collect())
    }

    /// Reads the listed repository-relative files; missing ones are skipped.
    pub fn read_files<S: AsRef<str>>(
        &self,
        names: &[S],
    ) -> Result<BTreeMap<String, String>, RepoError> {
        let mut out = BTreeMap::new();
        for name in names {
            let name = name.as_ref();
            let path = self.path.join(name);
            match std::fs::read(&path) {
                Ok(bytes) => {
                    let text =
                        String::from_utf8(bytes).map_err(|_| RepoError::NotUtf8(name.into()))?;
                    out.insert(name.to_string(), text);
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(source) => return Err(RepoError::Io { path, source }),
            }
        }
        Ok(out)
    }

    /// Applies `edits` atomically to the files in this worktree and returns
    /// the files whose content changed.
    pub fn apply(&self, edits: &[Edit]) -> Result<Vec<String>, EditError> {
        let names: Vec<&str> = edits.iter().map(|e| e.target_file.as_str()).collect();
        let before = self.read_files(&names)?;
        let after = apply_edits(&before, edits)?;
        let mut changed = Vec::new();
        for (name, text) in &after {
            if before.get(name) != Some(text) {
                let path = self.path.join(name);
                std::fs::write(&path, text).map_err(io_err(&path))?;
                changed.push(name.clone());
            }
        }
        Ok(changed)
    }
}
