//! Strict versus relaxed rejection sampling on a handful of dialogues.

use role_clarity::trajectory::{rejection_filter, FilterRule, Message, TokenMode, Trajectory};

fn dialogue(run: &str, ceo_last: &str, cpo_last: &str) -> Trajectory {
    let m = |round, agent: &str, role: &str, text: &str| Message::new(run, run, round, agent, role, text);
    Trajectory::new(vec![
        m(1, "ceo", "CEO", "Let us set the budget first."),
        m(1, "cpo", "CPO", "I will sketch the layout."),
        m(2, "ceo", "CEO", ceo_last),
        m(2, "cpo", "CPO", cpo_last),
    ])
    .expect("well-formed dialogue")
}

fn main() {
    let corpus = vec![
        dialogue("run-ok", "<INFO> approved", "<INFO> finalized"),
        dialogue("run-sloppy", "<INFO> approved", "INFO: done"),
        dialogue("run-open", "<INFO> approved", "still working"),
    ];
    let rule = FilterRule::new(TokenMode::Strict, vec!["CEO".into(), "CPO".into()]);
    for mode in [TokenMode::Strict, TokenMode::Relaxed] {
        let out = rejection_filter(&corpus, &rule.with_mode(mode));
        let kept: Vec<&str> = out.accepted.iter().map(|t| t.run_id()).collect();
        println!("{mode:?}: kept {kept:?}");
        for r in &out.rejected {
            println!("  {} -> {:?}", r.trajectory.run_id(), r.reasons);
        }
    }
}
