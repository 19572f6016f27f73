use regex::Regex;

/// Extraction patterns in priority order: the explicit `####` marker
/// outranks prose prefixes. Each has one capture group for the answer.
pub fn default_patterns() -> Vec<Regex> {
    [
        r"####\s*([^\n]+)",
        r"The answer is\s*([^\n]+)",
        r"Answer:\s*([^\n]+)",
    ]
    .iter()
    .map(|p| Regex::new(p).expect("static pattern compiles"))
    .collect()
}

/// Numeric-style cleanup only: surrounding whitespace, thousands commas,
/// trailing periods, leading dollar signs. Iterates to a fixed point so
/// canonicalizing twice is a no-op. No semantic equivalence.
pub fn canonicalize(raw: &str) -> String {
    let mut s = raw.replace(',', "");
    loop {
        let next = s.trim().trim_end_matches('.').trim_start_matches('$');
        if next == s {
            return s;
        }
        s = next.to_string();
    }
}

/// Pull the final answer out of a sampled completion, or `None` when no
/// pattern matches. The first pattern (in priority order) that matches
/// anywhere wins, taking its last match in the text.
pub fn extract_answer(completion: &str, patterns: &[Regex]) -> Option<String> {
    for pattern in patterns {
        let mut last = None;
        for caps in pattern.captures_iter(completion) {
            last = caps.get(1).map(|m| m.as_str());
        }
        if let Some(m) = last {
            let canon = canonicalize(m);
            if !canon.is_empty() {
                return Some(canon);
            }
        }
    }
    None
}
