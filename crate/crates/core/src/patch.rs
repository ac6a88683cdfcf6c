//! Structured Search/Replace proposals.
//!
//! A proposal is the only channel through which an agent may modify the
//! target repository. The wire format is line oriented:
//!
//! ```text
//! MOTIVATION: why the change should help
//! IDEA_SUMMARY: one line describing the change
//!
//! EDIT train.py
//! <<<<<<< SEARCH
//! WINDOW_PATTERN = "SSLL"
//! =======
//! WINDOW_PATTERN = "SLSL"
//! >>>>>>> REPLACE
//! ```
//!
//! Fence markers must sit at column 0 and match exactly. Everything between
//! two markers is taken verbatim, so search and replace blocks are sequences
//! of newline-terminated lines. Text before `MOTIVATION:` and between edit
//! sections is ignored.

use std::collections::BTreeMap;
use std::fmt;

pub const MOTIVATION_HEADER: &str = "MOTIVATION:";
pub const IDEA_SUMMARY_HEADER: &str = "IDEA_SUMMARY:";
pub const EDIT_PREFIX: &str = "EDIT ";
pub const SEARCH_MARKER: &str = "<<<<<<< SEARCH";
pub const DIVIDER_MARKER: &str = "=======";
pub const REPLACE_MARKER: &str = ">>>>>>> REPLACE";

/// One exact-match substitution inside a single repository file.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Edit {
    pub target_file: String,
    pub search_block: String,
    pub replace_block: String,
}

impl Edit {
    /// Builds an edit, enforcing the non-empty search block and safe path rules.
    pub fn new(
        target_file: impl Into<String>,
        search_block: impl Into<String>,
        replace_block: impl Into<String>,
    ) -> Result<Self, ParseError> {
        let target_file = target_file.into();
        let search_block = search_block.into();
        if let Some(reason) = unsafe_path_reason(&target_file) {
            return Err(ParseError::new(ParseErrorKind::UnsafePath, 0, reason));
        }
        if search_block.is_empty() {
            return Err(ParseError::new(
                ParseErrorKind::EmptySearchBlock,
                0,
                "search block is empty",
            ));
        }
        Ok(Self {
            target_file,
            search_block,
            replace_block: replace_block.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Proposal {
    pub motivation: String,
    pub idea_summary: String,
    pub edits: Vec<Edit>,
}

impl Proposal {
    /// Distinct target files in first-touched order.
    pub fn target_files(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for edit in &self.edits {
            if !seen.contains(&edit.target_file.as_str()) {
                seen.push(&edit.target_file);
            }
        }
        seen
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ParseErrorKind {
    MissingSection,
    NoEdits,
    MalformedEditFence,
    EmptySearchBlock,
    UnsafePath,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParseErrorKind::MissingSection => "missing section",
            ParseErrorKind::NoEdits => "no edits",
            ParseErrorKind::MalformedEditFence => "malformed edit fence",
            ParseErrorKind::EmptySearchBlock => "empty search block",
            ParseErrorKind::UnsafePath => "unsafe path",
        };
        f.write_str(s)
    }
}

/// First contract violation found while scanning a proposal top to bottom.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind} at line {line}: {detail}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    /// 1-based line number; 0 when the error is not tied to a line.
    pub line: usize,
    pub detail: String,
}

impl ParseError {
    fn new(kind: ParseErrorKind, line: usize, detail: impl Into<String>) -> Self {
        Self {
            kind,
            line,
            detail: detail.into(),
        }
    }
}

fn unsafe_path_reason(path: &str) -> Option<String> {
    if path.trim().is_empty() {
        return Some("empty path".into());
    }
    if path.contains('\0') {
        return Some("path contains NUL".into());
    }
    if path.starts_with('/') || path.starts_with('\\') {
        return Some(format!("absolute path `{path}`"));
    }
    let bytes = path.as_bytes();
    if bytes.len() >= 2 && bytes[1] == b':' && bytes[0].is_ascii_alphabetic() {
        return Some(format!("drive-qualified path `{path}`"));
    }
    for segment in path.split(['/', '\\']) {
        if segment == ".." {
            return Some(format!("parent traversal in `{path}`"));
        }
        if segment == ".git" {
            return Some(format!("VCS metadata path `{path}`"));
        }
    }
    None
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Preamble,
    Motivation,
    Summary,
    Edits,
}

fn is_marker(line: &str) -> bool {
    line == SEARCH_MARKER || line == DIVIDER_MARKER || line == REPLACE_MARKER
}

/// Lines with their terminators kept, plus the terminator-free text.
fn split_lines(raw: &str) -> Vec<(&str, &str)> {
    raw.split_inclusive('\n')
        .map(|full| (full, full.strip_suffix('\n').unwrap_or(full)))
        .collect()
}

/// Parses agent output into a [`Proposal`].
///
/// Total and deterministic: any input yields either a proposal satisfying
/// every invariant or the first violation encountered.
pub fn parse_proposal(raw: &str) -> Result<Proposal, ParseError> {
    let lines = split_lines(raw);
    let mut section = Section::Preamble;
    let mut motivation = String::new();
    let mut summary = String::new();
    let mut edits = Vec::new();
    let mut i = 0;

    while i < lines.len() {
        let (full, text) = lines[i];
        let lineno = i + 1;
        match section {
            Section::Preamble => {
                if let Some(rest) = text.strip_prefix(MOTIVATION_HEADER) {
                    motivation.push_str(rest.trim_start());
                    motivation.push('\n');
                    section = Section::Motivation;
                } else if text.starts_with(IDEA_SUMMARY_HEADER)
                    || text.starts_with(EDIT_PREFIX)
                    || is_marker(text)
                {
                    return Err(ParseError::new(
                        ParseErrorKind::MissingSection,
                        lineno,
                        "expected MOTIVATION: before this line",
                    ));
                }
            }
            Section::Motivation => {
                if let Some(rest) = text.strip_prefix(IDEA_SUMMARY_HEADER) {
                    summary.push_str(rest.trim_start());
                    summary.push('\n');
                    section = Section::Summary;
                } else if text.starts_with(EDIT_PREFIX) || is_marker(text) {
                    return Err(ParseError::new(
                        ParseErrorKind::MissingSection,
                        lineno,
                        "expected IDEA_SUMMARY: before this line",
                    ));
                } else {
                    motivation.push_str(full);
                }
            }
            Section::Summary | Section::Edits => {
                if let Some(path) = text.strip_prefix(EDIT_PREFIX) {
                    if section == Section::Summary && summary.trim().is_empty() {
                        return Err(ParseError::new(
                            ParseErrorKind::MissingSection,
                            lineno,
                            "IDEA_SUMMARY is empty",
                        ));
                    }
                    section = Section::Edits;
                    let (edit, next) = parse_edit(&lines, i, path.trim())?;
                    edits.push(edit);
                    i = next;
                    continue;
                } else if is_marker(text) {
                    return Err(ParseError::new(
                        ParseErrorKind::MalformedEditFence,
                        lineno,
                        format!("fence marker `{text}` outside an EDIT section"),
                    ));
                } else if section == Section::Summary {
                    summary.push_str(full);
                }
            }
        }
        i += 1;
    }

    match section {
        Section::Preamble => {
            return Err(ParseError::new(
                ParseErrorKind::MissingSection,
                lines.len(),
                "no MOTIVATION: section",
            ))
        }
        Section::Motivation => {
            return Err(ParseError::new(
                ParseErrorKind::MissingSection,
                lines.len(),
                "no IDEA_SUMMARY: section",
            ))
        }
        Section::Summary if summary.trim().is_empty() => {
            return Err(ParseError::new(
                ParseErrorKind::MissingSection,
                lines.len(),
                "IDEA_SUMMARY is empty",
            ))
        }
        _ => {}
    }
    if edits.is_empty() {
        return Err(ParseError::new(
            ParseErrorKind::NoEdits,
            lines.len(),
            "proposal contains no EDIT sections",
        ));
    }

    Ok(Proposal {
        motivation: motivation.trim().to_string(),
        idea_summary: summary.trim().to_string(),
        edits,
    })
}

/// Parses one `EDIT` section starting at `start`; returns the edit and the
/// index of the first line after the closing REPLACE marker.
fn parse_edit(
    lines: &[(&str, &str)],
    start: usize,
    path: &str,
) -> Result<(Edit, usize), ParseError> {
    let edit_line = start + 1;
    if let Some(reason) = unsafe_path_reason(path) {
        return Err(ParseError::new(
            ParseErrorKind::UnsafePath,
            edit_line,
            reason,
        ));
    }
    let open = start + 1;
    match lines.get(open) {
        Some((_, text)) if *text == SEARCH_MARKER => {}
        Some((_, text)) => {
            return Err(ParseError::new(
                ParseErrorKind::MalformedEditFence,
                open + 1,
                format!("expected `{SEARCH_MARKER}`, found `{text}`"),
            ))
        }
        None => {
            return Err(ParseError::new(
                ParseErrorKind::MalformedEditFence,
                edit_line,
                format!("EDIT {path} has no fence"),
            ))
        }
    }

    let (search, divider) = collect_block(lines, open + 1, DIVIDER_MARKER)?;
    let (replace, close) = collect_block(lines, divider + 1, REPLACE_MARKER)?;
    if search.is_empty() {
        return Err(ParseError::new(
            ParseErrorKind::EmptySearchBlock,
            open + 1,
            format!("empty search block for {path}"),
        ));
    }
    Ok((
        Edit {
            target_file: path.to_string(),
            search_block: search,
            replace_block: replace,
        },
        close + 1,
    ))
}

fn collect_block(
    lines: &[(&str, &str)],
    from: usize,
    terminator: &str,
) -> Result<(String, usize), ParseError> {
    let mut block = String::new();
    for (idx, (full, text)) in lines.iter().enumerate().skip(from) {
        if *text == terminator {
            return Ok((block, idx));
        }
        if is_marker(text) {
            return Err(ParseError::new(
                ParseErrorKind::MalformedEditFence,
                idx + 1,
                format!("expected `{terminator}`, found `{text}`"),
            ));
        }
        block.push_str(full);
    }
    Err(ParseError::new(
        ParseErrorKind::MalformedEditFence,
        lines.len(),
        format!("unterminated fence, missing `{terminator}`"),
    ))
}

fn push_block(out: &mut String, block: &str) {
    out.push_str(block);
    if !block.is_empty() && !block.ends_with('\n') {
        out.push('\n');
    }
}

/// Renders a proposal in the wire format accepted by [`parse_proposal`].
///
/// Blocks that do not end in a newline get one appended, since fence
/// markers must start their own line.
pub fn render_proposal(p: &Proposal) -> String {
    let mut out = String::new();
    out.push_str(MOTIVATION_HEADER);
    out.push(' ');
    out.push_str(&p.motivation);
    out.push('\n');
    out.push_str(IDEA_SUMMARY_HEADER);
    out.push(' ');
    out.push_str(&p.idea_summary);
    out.push('\n');
    for edit in &p.edits {
        out.push('\n');
        out.push_str(EDIT_PREFIX);
        out.push_str(&edit.target_file);
        out.push('\n');
        out.push_str(SEARCH_MARKER);
        out.push('\n');
        push_block(&mut out, &edit.search_block);
        out.push_str(DIVIDER_MARKER);
        out.push('\n');
        push_block(&mut out, &edit.replace_block);
        out.push_str(REPLACE_MARKER);
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ApplyErrorKind {
    NoMatch,
    Ambiguous { occurrences: usize },
    UnknownFile,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("edit {edit_index} on `{target_file}`: {kind:?}")]
pub struct ApplyError {
    pub kind: ApplyErrorKind,
    /// 0-based index into the edit list.
    pub edit_index: usize,
    pub target_file: String,
}

/// Number of (possibly overlapping) occurrences of `needle` in `haystack`.
pub fn count_occurrences(haystack: &str, needle: &str) -> usize {
    if needle.is_empty() {
        return 0;
    }
    let mut count = 0;
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(needle) {
        count += 1;
        let at = from + pos;
        let step = haystack[at..].chars().next().map_or(1, char::len_utf8);
        from = at + step;
    }
    count
}

/// Applies `edits` in order to a copy of `files`.
///
/// Each search block must occur exactly once in the current, partially
/// edited text of its file. On any failure the caller's map is untouched
/// and nothing partial is returned.
pub fn apply_edits(
    files: &BTreeMap<String, String>,
    edits: &[Edit],
) -> Result<BTreeMap<String, String>, ApplyError> {
    let mut out = files.clone();
    for (edit_index, edit) in edits.iter().enumerate() {
        let fail = |kind| ApplyError {
            kind,
            edit_index,
            target_file: edit.target_file.clone(),
        };
        let Some(text) = out.get_mut(&edit.target_file) else {
            return Err(fail(ApplyErrorKind::UnknownFile));
        };
        match count_occurrences(text, &edit.search_block) {
            0 => return Err(fail(ApplyErrorKind::NoMatch)),
            1 => {
                *text = text.replacen(&edit.search_block, &edit.replace_block, 1);
            }
            n => return Err(fail(ApplyErrorKind::Ambiguous { occurrences: n })),
        }
    }
    Ok(out)
}
