//! Canonical template rendering.
//!
//! `render` is the inverse of [`crate::parser::parse_trace`] on well-formed
//! traces: parsing the rendered text gives back the same trace.

use std::sync::OnceLock;

use regex::Regex;

use crate::trace::{ReasoningTrace, RetrievedDoc, Turn};

const TAG_NAMES: [&str; 4] = ["think", "search", "information", "answer"];

/// Makes free text safe to embed inside an information block:
///
/// * `##` becomes `# #` (repeated until no `##` is left),
/// * template tags such as `<search>` become `< search>`,
/// * document headers `Doc N(Title: ` lose their shape (`(Title : `),
/// * surrounding whitespace is trimmed.
///
/// All rewrites keep the alphanumeric tokens intact, and text that came out
/// of the parser passes through unchanged.
pub fn escape_doc_text(text: &str) -> String {
    let mut s = text.to_owned();
    while s.contains("##") {
        s = s.replace("##", "# #");
    }
    for name in TAG_NAMES {
        s = s.replace(&format!("<{name}>"), &format!("< {name}>"));
        s = s.replace(&format!("</{name}>"), &format!("< /{name}>"));
    }
    s = header_shape().replace_all(&s, "Doc $1(Title : ").into_owned();
    s.trim().to_owned()
}

fn header_shape() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Doc (\d+)\(Title: ").expect("valid regex"))
}

/// A title that can sit in a `Doc N(Title: ...)` header. Quoted headers
/// cannot hold `"`, unquoted ones cannot hold `)`; a title with both gets
/// its quotes swapped for apostrophes.
pub fn escape_title(title: &str) -> String {
    let t = escape_doc_text(title);
    if t.contains('"') && t.contains(')') {
        t.replace('"', "'")
    } else {
        t
    }
}

fn header_title(title: &str) -> String {
    if title.contains('"') {
        title.to_owned()
    } else {
        format!("\"{title}\"")
    }
}

/// A document as it will read back after a render/parse cycle.
pub fn sanitize_doc(doc: &RetrievedDoc) -> RetrievedDoc {
    RetrievedDoc {
        doc_id: doc.doc_id.clone(),
        title: escape_title(&doc.title),
        body: escape_doc_text(&doc.body),
        score: doc.score,
    }
}

/// `Doc N(Title: "...") body` for each document, space separated.
pub fn render_doc_group(docs: &[RetrievedDoc]) -> String {
    docs.iter()
        .enumerate()
        .map(|(i, d)| {
            let d = sanitize_doc(d);
            let title = header_title(&d.title);
            if d.body.is_empty() {
                format!("Doc {}(Title: {title})", i + 1)
            } else {
                format!("Doc {}(Title: {title}) {}", i + 1, d.body)
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Information block content: one rendered group per subquery, joined by ` ## `.
pub fn render_information(doc_groups: &[Vec<RetrievedDoc>]) -> String {
    doc_groups.iter().map(|g| render_doc_group(g)).collect::<Vec<_>>().join(" ## ")
}

pub fn render_turn(turn: &Turn) -> String {
    match turn {
        Turn::Think(t) => format!("<think> {t} </think>"),
        Turn::Search(qs) => format!("<search> {} </search>", qs.join(" ## ")),
        Turn::Information(groups) => format!("<information> {} </information>", render_information(groups)),
        Turn::Answer(a) => format!("<answer> {a} </answer>"),
    }
}

/// Renders a trace in template wire format, one turn per line.
pub fn render(trace: &ReasoningTrace) -> String {
    trace.turns.iter().map(render_turn).collect::<Vec<_>>().join("\n")
}
