//! Deliberately naive reference implementations of BLEU and ROUGE-L.

fn ngrams<'a>(tokens: &[&'a str], n: usize) -> Vec<Vec<&'a str>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= tokens.len() {
        out.push(tokens[i..i + n].to_vec());
        i += 1;
    }
    out
}

fn occurrences(haystack: &[Vec<&str>], needle: &[&str]) -> usize {
    haystack.iter().filter(|g| g.as_slice() == needle).count()
}

/// Sentence BLEU, max order 4: p1 unsmoothed, add-one for higher orders,
/// orders without candidate n-grams dropped, closest-reference brevity
/// penalty with ties to the shorter reference.
pub fn bleu(candidate: &[&str], references: &[Vec<&str>]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=4 {
        let cand = ngrams(candidate, n);
        if cand.is_empty() {
            continue;
        }
        let refs: Vec<Vec<Vec<&str>>> = references.iter().map(|r| ngrams(r, n)).collect();
        let mut seen: Vec<&Vec<&str>> = Vec::new();
        let mut matched = 0;
        for g in &cand {
            if seen.contains(&g) {
                continue;
            }
            seen.push(g);
            let in_cand = occurrences(&cand, g);
            let in_refs = refs.iter().map(|r| occurrences(r, g)).max().unwrap_or(0);
            matched += in_cand.min(in_refs);
        }
        let p = if n == 1 {
            matched as f64 / cand.len() as f64
        } else {
            (matched as f64 + 1.0) / (cand.len() as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
        orders += 1;
    }
    let c = candidate.len() as f64;
    let mut best: Option<usize> = None;
    for r in references {
        let len = r.len();
        best = match best {
            None => Some(len),
            Some(b) => {
                let (db, dl) = ((b as f64 - c).abs(), (len as f64 - c).abs());
                if dl < db || (dl == db && len < b) {
                    Some(len)
                } else {
                    Some(b)
                }
            }
        };
    }
    let r = best.unwrap_or(0) as f64;
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * (log_sum / orders as f64).exp()
}

/// ROUGE-L (precision, recall, F1) from a full quadratic LCS table.
pub fn rouge_l(candidate: &[&str], reference: &[&str]) -> (f64, f64, f64) {
    if candidate.is_empty() || reference.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let (m, n) = (candidate.len(), reference.len());
    let mut table = vec![vec![0usize; n + 1]; m + 1];
    for i in 1..=m {
        for j in 1..=n {
            table[i][j] = if candidate[i - 1] == reference[j - 1] {
                table[i - 1][j - 1] + 1
            } else {
                table[i - 1][j].max(table[i][j - 1])
            };
        }
    }
    let lcs = table[m][n] as f64;
    let p = lcs / m as f64;
    let r = lcs / n as f64;
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}
