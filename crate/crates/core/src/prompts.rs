//! Prompt templates for the remote generation, reader and judge calls.
//! Placeholders are `{name}` and are filled by [`render`].

pub const BOUNDARY: &str = r#"You segment a dialogue stream into episodes. Decide whether the new messages close the current episode and open a new one.

Current episode so far:
{history}

New messages:
{incoming}

Signals for a new episode, strongest first: a different topic or event; a changed purpose of the conversation; a time gap of more than 30 minutes between messages; explicit transition phrases ("by the way", "changing topics"); relevance to the current episode below about 30%; the episode already holding 10-15 messages. When unsure, prefer starting a new episode. If the current episode is empty, the answer is always false.

Reply with a single JSON object and nothing else:
{"split": true or false, "reason": "one short sentence"}"#;

pub const EPISODE: &str = r#"Rewrite the conversation below as an episodic memory record.

Conversation:
{conversation}

Why this block was cut here:
{reason}

Write the content as a third-person narrative that keeps every concrete detail: who took part and when, what was discussed, decisions, feelings and plans. State the time to the hour. Where the speakers use relative times ("last week", "tomorrow"), add the absolute date in parentheses after them. Take the time of the episode from the message timestamps, not from the current date.

Reply with a single JSON object and nothing else:
{"title": "specific searchable title, 10-20 words", "content": "narrative", "timestamp": "YYYY-MM-DDTHH:MM:SS"}"#;

pub const SEMANTIC: &str = r#"Extract durable facts from the episodes below: statements that will likely still hold months from now, are concrete enough to search for, and make sense without the conversation. Useful kinds: identity and work, lasting preferences, relationships, skills and tools, goals and plans, routines. Skip courtesies, passing moods, and remarks about the conversation itself.

Episodes:
{episodes}

Reply with a single JSON object and nothing else:
{"statements": ["one self-contained fact per entry", "..."]}"#;

pub const THEME: &str = r#"The statements below belong to one group of related facts. Write a short, stable description naming their common topic. Reply with the description only.

{statements}"#;

/// Reader template for short-phrase answers over two speakers' memories.
pub const ANSWER_SHORT: &str = r#"You answer questions from stored conversation memories of two speakers. Memories carry timestamps.

Rules:
- Use only the memories below; when they disagree, trust the most recent one.
- Turn relative times into concrete dates using the memory's timestamp (a memory from 4 May 2022 saying "last year" means 2021), and write dates naturally, e.g. "7 May 2023".
- Do not mistake people mentioned in a memory for the speakers themselves.
- Answer in at most 5-8 words.

Semantic Memories:
{semantic}

Episodic Memories:
{episodic}

Question: {question}

Answer:"#;

/// Reader template for single-sentence answers over a personal profile store.
pub const ANSWER_SENTENCE: &str = r#"Answer the question using only the memories below. Prefer explicit attributes such as names, numbers, dates and nationality terms, and keep those values exactly as written. If memories conflict, use the most recent one.

Write exactly one complete sentence, with no quotes, lists, prefixes or explanation.

Episodic Memories:
{episodic}

Semantic Memories:
{semantic}

Question: {question}

Answer:"#;

pub const CONFIDENCE_JUDGE: &str = r#"Given the memories below, how confident can a reader be when answering the question? Reply with a single number between 0 (no idea) and 1 (certain), nothing else.

Memories:
{context}

Question: {question}"#;

/// Replaces each `{key}` in `template` with its value.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_fills_placeholders() {
        let s = render(
            ANSWER_SHORT,
            &[("semantic", "S"), ("episodic", "E"), ("question", "Q")],
        );
        assert!(s.contains("Semantic Memories:\nS"));
        assert!(s.contains("Episodic Memories:\nE"));
        assert!(s.contains("Question: Q"));
        assert!(!s.contains("{semantic}"));
    }
}
