use serde::{Deserialize, Serialize};

/// How section text is cut into chunks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkStrategy {
    /// At most `n` characters, cut after whitespace when the window has any.
    FixedSize(usize),
    /// Blank-line separated paragraphs; separators stay with the preceding chunk.
    #[default]
    Paragraph,
    /// One word per chunk; trailing whitespace stays with the word.
    Words,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub index: usize,
    pub content: String,
    /// Character offsets within the section, end exclusive.
    pub span: (usize, usize),
}

/// Cuts `content` into chunks whose concatenation is `content` again.
/// A fixed size of zero is treated as one.
pub fn chunk(content: &str, strategy: ChunkStrategy) -> Vec<Chunk> {
    let chars: Vec<char> = content.chars().collect();
    let ends = match strategy {
        ChunkStrategy::FixedSize(n) => fixed_ends(&chars, n.max(1)),
        ChunkStrategy::Paragraph => paragraph_ends(&chars),
        ChunkStrategy::Words => word_ends(&chars),
    };
    let mut out = Vec::with_capacity(ends.len());
    let mut start = 0;
    for end in ends {
        out.push(Chunk {
            index: out.len(),
            content: chars[start..end].iter().collect(),
            span: (start, end),
        });
        start = end;
    }
    out
}

fn fixed_ends(chars: &[char], n: usize) -> Vec<usize> {
    let mut ends = Vec::new();
    let mut pos = 0;
    while pos < chars.len() {
        let limit = pos + n;
        let end = if limit >= chars.len() {
            chars.len()
        } else {
            match chars[pos..limit].iter().rposition(|c| c.is_whitespace()) {
                Some(i) => pos + i + 1,
                None => limit,
            }
        };
        ends.push(end);
        pos = end;
    }
    ends
}

fn paragraph_ends(chars: &[char]) -> Vec<usize> {
    let mut ends = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '\n' {
            // Look for another newline after only horizontal whitespace.
            let mut j = i + 1;
            let mut last_nl = None;
            while j < chars.len() && chars[j].is_whitespace() {
                if chars[j] == '\n' {
                    last_nl = Some(j);
                }
                j += 1;
            }
            if let Some(nl) = last_nl {
                let end = nl + 1;
                if end < chars.len() {
                    ends.push(end);
                }
                i = end;
                continue;
            }
        }
        i += 1;
    }
    if !chars.is_empty() {
        ends.push(chars.len());
    }
    ends
}

fn word_ends(chars: &[char]) -> Vec<usize> {
    let mut ends = Vec::new();
    let mut seen_word = false;
    for i in 0..chars.len() {
        let ws = chars[i].is_whitespace();
        if !ws && seen_word && i > 0 && chars[i - 1].is_whitespace() {
            ends.push(i);
        }
        seen_word |= !ws;
    }
    if !chars.is_empty() {
        ends.push(chars.len());
    }
    ends
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn contents(s: &str, st: ChunkStrategy) -> Vec<String> {
        chunk(s, st).into_iter().map(|c| c.content).collect()
    }

    #[test]
    fn fixed_size_hard_cut() {
        assert_eq!(contents("abc", ChunkStrategy::FixedSize(2)), ["ab", "c"]);
    }

    #[test]
    fn fixed_size_prefers_whitespace() {
        assert_eq!(contents("ab cd ef", ChunkStrategy::FixedSize(4)), ["ab ", "cd ", "ef"]);
    }

    #[test]
    fn paragraphs_keep_separators() {
        assert_eq!(
            contents("one\ntwo\n\nthree\n \n\nfour", ChunkStrategy::Paragraph),
            ["one\ntwo\n\n", "three\n \n\n", "four"]
        );
    }

    #[test]
    fn words_attach_delimiters() {
        assert_eq!(
            contents("  Mario Rossi,  nato a Roma.", ChunkStrategy::Words),
            ["  Mario ", "Rossi,  ", "nato ", "a ", "Roma."]
        );
    }

    #[test]
    fn empty_content_has_no_chunks() {
        for st in [ChunkStrategy::FixedSize(3), ChunkStrategy::Paragraph, ChunkStrategy::Words] {
            assert!(chunk("", st).is_empty());
        }
    }

    fn arb_strategy() -> impl Strategy<Value = ChunkStrategy> {
        prop_oneof![
            (0usize..20).prop_map(ChunkStrategy::FixedSize),
            Just(ChunkStrategy::Paragraph),
            Just(ChunkStrategy::Words),
        ]
    }

    proptest! {
        #[test]
        fn chunks_reconstruct_and_partition(s in "(\\PC|[ \n\t]){0,200}", st in arb_strategy()) {
            let chunks = chunk(&s, st);
            let joined: String = chunks.iter().map(|c| c.content.as_str()).collect();
            prop_assert_eq!(&joined, &s);
            let mut pos = 0;
            for (i, c) in chunks.iter().enumerate() {
                prop_assert_eq!(c.index, i);
                prop_assert_eq!(c.span.0, pos);
                prop_assert!(c.span.1 > c.span.0);
                prop_assert_eq!(c.span.1 - c.span.0, c.content.chars().count());
                pos = c.span.1;
            }
            prop_assert_eq!(pos, s.chars().count());
            if let ChunkStrategy::FixedSize(n) = st {
                prop_assert!(chunks.iter().all(|c| c.content.chars().count() <= n.max(1)));
            }
        }
    }
}
