//! Parses a proposal and applies its edits in memory, then shows the two
//! ways a search block can be rejected.

use std::collections::BTreeMap;

use autoresearch::patch::{apply_edits, parse_proposal, Edit};

const REPLY: &str = "\
MOTIVATION: the schedule decays too late, shorten the plateau
IDEA_SUMMARY: earlier warmdown
EDIT train.py
<<<<<<< SEARCH
WARMDOWN_RATIO = 0.5
=======
WARMDOWN_RATIO = 0.35
>>>>>>> REPLACE
";

fn main() {
    let files = BTreeMap::from([(
        "train.py".to_string(),
        "LR = 0.04\nWARMDOWN_RATIO = 0.5\nDEPTH = 8\nDEPTH = 8\n".to_string(),
    )]);

    let proposal = parse_proposal(REPLY).expect("well-formed reply");
    println!("idea: {}", proposal.idea_summary);
    let patched = apply_edits(&files, &proposal.edits).expect("unique match");
    print!("{}", patched["train.py"]);

    for search in ["LR = 0.05\n", "DEPTH = 8\n"] {
        let edit = Edit::new("train.py", search, "").unwrap();
        let err = apply_edits(&files, &[edit]).unwrap_err();
        println!("{:?}: {err}", search.trim());
    }
}
