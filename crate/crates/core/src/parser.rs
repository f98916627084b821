//! Tagged rollout text to [`ReasoningTrace`].
//!
//! Parsing never fails. Every problem becomes an [`Issue`] and, depending on
//! its severity, downgrades `f_format` or `f_retrieval`.
//!
//! Issue codes (stable):
//!
//! | code                     | severity   |
//! |--------------------------|------------|
//! | `unclosed-tag`           | structural |
//! | `unmatched-close`        | structural |
//! | `mismatched-close`       | structural |
//! | `nested-tag`             | structural |
//! | `bad-sequence`           | structural |
//! | `missing-answer`         | structural |
//! | `multiple-answers`       | structural |
//! | `answer-not-final`       | structural |
//! | `empty-search`           | structural |
//! | `no-search`              | retrieval  |
//! | `search-without-information` | retrieval |
//! | `misaligned-information` | retrieval  |
//! | `too-many-subqueries`    | advisory   |
//! | `stray-text`             | cosmetic   |
//! | `stray-information-text` | cosmetic   |

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::trace::{ReasoningTrace, RetrievedDoc, Turn, TurnKind, SUBQUERY_SOFT_CAP};

pub const SUBQUERY_DELIMITER: &str = "##";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    /// Breaks the template; clears `f_format`.
    Structural,
    /// Breaks search/information pairing; clears `f_retrieval`.
    Retrieval,
    /// Recorded only.
    Advisory,
    /// Text outside the grammar; ignored for structure.
    Cosmetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IssueCode {
    UnclosedTag,
    UnmatchedClose,
    MismatchedClose,
    NestedTag,
    BadSequence,
    MissingAnswer,
    MultipleAnswers,
    AnswerNotFinal,
    EmptySearch,
    NoSearch,
    SearchWithoutInformation,
    MisalignedInformation,
    TooManySubqueries,
    StrayText,
    StrayInformationText,
}

impl IssueCode {
    pub fn severity(self) -> Severity {
        use IssueCode::*;
        match self {
            UnclosedTag | UnmatchedClose | MismatchedClose | NestedTag | BadSequence | MissingAnswer
            | MultipleAnswers | AnswerNotFinal | EmptySearch => Severity::Structural,
            NoSearch | SearchWithoutInformation | MisalignedInformation => Severity::Retrieval,
            TooManySubqueries => Severity::Advisory,
            StrayText | StrayInformationText => Severity::Cosmetic,
        }
    }

    pub fn as_str(self) -> &'static str {
        use IssueCode::*;
        match self {
            UnclosedTag => "unclosed-tag",
            UnmatchedClose => "unmatched-close",
            MismatchedClose => "mismatched-close",
            NestedTag => "nested-tag",
            BadSequence => "bad-sequence",
            MissingAnswer => "missing-answer",
            MultipleAnswers => "multiple-answers",
            AnswerNotFinal => "answer-not-final",
            EmptySearch => "empty-search",
            NoSearch => "no-search",
            SearchWithoutInformation => "search-without-information",
            MisalignedInformation => "misaligned-information",
            TooManySubqueries => "too-many-subqueries",
            StrayText => "stray-text",
            StrayInformationText => "stray-information-text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    /// Byte offset into the raw text.
    pub position: usize,
    pub code: IssueCode,
    pub severity: Severity,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub trace: ReasoningTrace,
    pub f_format: bool,
    pub f_retrieval: bool,
    pub issues: Vec<Issue>,
}

impl ParseReport {
    pub fn has(&self, code: IssueCode) -> bool {
        self.issues.iter().any(|i| i.code == code)
    }
}

/// Splits search content on `##`, trims each piece and drops empty ones.
pub fn split_subqueries(search_content: &str) -> Vec<String> {
    search_content.split(SUBQUERY_DELIMITER).map(str::trim).filter(|s| !s.is_empty()).map(str::to_owned).collect()
}

const TAGS: [(&str, TurnKind); 4] = [
    ("think", TurnKind::Think),
    ("search", TurnKind::Search),
    ("information", TurnKind::Information),
    ("answer", TurnKind::Answer),
];

#[derive(Debug, Clone, Copy)]
struct Tag {
    kind: TurnKind,
    close: bool,
    start: usize,
    end: usize,
}

fn tag_at(raw: &str, at: usize) -> Option<Tag> {
    let rest = &raw[at..];
    let (close, name_start) = if rest.starts_with("</") { (true, 2) } else { (false, 1) };
    let rest = &rest[name_start..];
    TAGS.iter().find_map(|(name, kind)| {
        let tail = rest.strip_prefix(name)?;
        tail.starts_with('>').then(|| Tag { kind: *kind, close, start: at, end: at + name_start + name.len() + 1 })
    })
}

fn tags(raw: &str) -> Vec<Tag> {
    raw.match_indices('<').filter_map(|(i, _)| tag_at(raw, i)).collect()
}

fn tag_name(kind: TurnKind) -> &'static str {
    TAGS.iter().find(|(_, k)| *k == kind).map(|(n, _)| *n).unwrap_or("?")
}

struct Span<'a> {
    kind: TurnKind,
    start: usize,
    body: &'a str,
}

struct Parser<'a> {
    raw: &'a str,
    issues: Vec<Issue>,
}

impl<'a> Parser<'a> {
    fn issue(&mut self, position: usize, code: IssueCode, message: impl Into<String>) {
        self.issues.push(Issue { position, code, severity: code.severity(), message: message.into() });
    }

    fn stray(&mut self, from: usize, to: usize) {
        if from < to && !self.raw[from..to].trim().is_empty() {
            self.issue(from, IssueCode::StrayText, format!("{} bytes outside any tag", to - from));
        }
    }

    /// Pairs open and close tags into spans. Recovery keeps as much of the
    /// trace as possible: a nested open closes the current span early.
    fn spans(&mut self) -> Vec<Span<'a>> {
        let raw = self.raw;
        let mut spans = Vec::new();
        let mut open: Option<Tag> = None;
        let mut cursor = 0usize;

        for tag in tags(raw) {
            match (open, tag.close) {
                (None, false) => {
                    self.stray(cursor, tag.start);
                    open = Some(tag);
                }
                (None, true) => {
                    self.stray(cursor, tag.start);
                    self.issue(
                        tag.start,
                        IssueCode::UnmatchedClose,
                        format!("</{}> without an open tag", tag_name(tag.kind)),
                    );
                    cursor = tag.end;
                }
                (Some(o), true) if o.kind == tag.kind => {
                    spans.push(Span { kind: o.kind, start: o.start, body: &raw[o.end..tag.start] });
                    open = None;
                    cursor = tag.end;
                }
                (Some(o), true) => {
                    self.issue(
                        tag.start,
                        IssueCode::MismatchedClose,
                        format!("</{}> while <{}> is open", tag_name(tag.kind), tag_name(o.kind)),
                    );
                }
                (Some(o), false) => {
                    self.issue(
                        tag.start,
                        IssueCode::NestedTag,
                        format!("<{}> inside <{}>", tag_name(tag.kind), tag_name(o.kind)),
                    );
                    spans.push(Span { kind: o.kind, start: o.start, body: &raw[o.end..tag.start] });
                    open = Some(tag);
                }
            }
        }

        if let Some(o) = open {
            self.issue(o.start, IssueCode::UnclosedTag, format!("<{}> never closed", tag_name(o.kind)));
            spans.push(Span { kind: o.kind, start: o.start, body: &raw[o.end..] });
        } else {
            self.stray(cursor, raw.len());
        }
        spans
    }

    fn information(&mut self, span: &Span<'_>) -> Vec<Vec<RetrievedDoc>> {
        span.body
            .split(SUBQUERY_DELIMITER)
            .map(|group| {
                let (docs, stray) = parse_doc_group(group);
                if stray {
                    self.issue(span.start, IssueCode::StrayInformationText, "text before the first document header");
                }
                docs
            })
            .collect()
    }
}

fn doc_header() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"Doc \d+\(Title: (?:"([^"]*)"|([^)]*))\)"#).expect("valid regex"))
}

/// Splits one information group into documents. Returns the documents and
/// whether non-blank text preceded the first header.
///
/// A group without any `Doc N(Title: ...)` header but with text becomes a
/// single untitled document.
pub fn parse_doc_group(group: &str) -> (Vec<RetrievedDoc>, bool) {
    let headers: Vec<_> = doc_header().captures_iter(group).collect();
    if headers.is_empty() {
        let body = group.trim();
        return if body.is_empty() { (Vec::new(), false) } else { (vec![RetrievedDoc::new("", body)], false) };
    }
    let first = headers[0].get(0).expect("whole match").start();
    let stray = !group[..first].trim().is_empty();
    let mut docs = Vec::with_capacity(headers.len());
    for (n, cap) in headers.iter().enumerate() {
        let whole = cap.get(0).expect("whole match");
        let title = cap.get(1).or_else(|| cap.get(2)).map(|m| m.as_str()).unwrap_or("");
        let body_end = headers.get(n + 1).map(|c| c.get(0).expect("whole match").start()).unwrap_or(group.len());
        docs.push(RetrievedDoc::new(title.trim(), group[whole.end()..body_end].trim()));
    }
    (docs, stray)
}

/// Parses raw rollout text. See the module docs for the issue codes.
///
/// `f_format` holds when every tag closes in order, the turns follow
/// `(Think, [Search, Information]?)*, Think, Answer`, and exactly one
/// Answer exists and is last. `f_retrieval` additionally needs at least one
/// Search, each immediately followed by an Information turn with one group
/// per subquery.
pub fn parse_trace(raw: &str, question: &str) -> ParseReport {
    let mut p = Parser { raw, issues: Vec::new() };
    let spans = p.spans();

    let mut trace = ReasoningTrace::new(question);
    let mut starts = Vec::with_capacity(spans.len());
    for span in &spans {
        let turn = match span.kind {
            TurnKind::Think => Turn::Think(span.body.trim().to_owned()),
            TurnKind::Answer => Turn::Answer(span.body.trim().to_owned()),
            TurnKind::Search => {
                let qs = split_subqueries(span.body);
                if qs.is_empty() {
                    p.issue(span.start, IssueCode::EmptySearch, "search with no subqueries");
                } else if qs.len() > SUBQUERY_SOFT_CAP {
                    p.issue(
                        span.start,
                        IssueCode::TooManySubqueries,
                        format!("{} subqueries, at most {SUBQUERY_SOFT_CAP} encouraged", qs.len()),
                    );
                }
                Turn::Search(qs)
            }
            TurnKind::Information => Turn::Information(p.information(span)),
        };
        starts.push(span.start);
        trace.push(turn);
    }

    check_sequence(&mut p, &trace, &starts);
    check_retrieval(&mut p, &trace, &starts);

    let f_format = !p.issues.iter().any(|i| i.severity == Severity::Structural);
    let f_retrieval = f_format && !p.issues.iter().any(|i| i.severity == Severity::Retrieval);
    ParseReport { trace, f_format, f_retrieval, issues: p.issues }
}

fn check_sequence(p: &mut Parser<'_>, trace: &ReasoningTrace, starts: &[usize]) {
    let kinds: Vec<TurnKind> = trace.turns.iter().map(Turn::kind).collect();
    let answers: Vec<usize> =
        kinds.iter().enumerate().filter(|(_, k)| **k == TurnKind::Answer).map(|(i, _)| i).collect();

    match answers.as_slice() {
        [] => p.issue(p.raw.len(), IssueCode::MissingAnswer, "no <answer> turn"),
        [only] if *only + 1 != kinds.len() => {
            p.issue(starts[*only], IssueCode::AnswerNotFinal, "turns follow the answer")
        }
        [_] => {}
        [_, second, ..] => p.issue(starts[*second], IssueCode::MultipleAnswers, "more than one <answer>"),
    }

    // (Think, [Search, Information]?)*, Think, Answer
    #[derive(Clone, Copy, PartialEq)]
    enum State {
        ExpectThink,
        AfterThink,
        AfterSearch,
        AfterAnswer,
    }
    let mut state = State::ExpectThink;
    for (i, kind) in kinds.iter().enumerate() {
        let next = match (state, kind) {
            (State::ExpectThink | State::AfterThink, TurnKind::Think) => Some(State::AfterThink),
            (State::AfterThink, TurnKind::Search) => Some(State::AfterSearch),
            (State::AfterThink, TurnKind::Answer) => Some(State::AfterAnswer),
            (State::AfterSearch, TurnKind::Information) => Some(State::ExpectThink),
            // anything after the answer is already reported above
            (State::AfterAnswer, _) => return,
            _ => None,
        };
        match next {
            Some(s) => state = s,
            None => {
                p.issue(starts[i], IssueCode::BadSequence, format!("unexpected <{}> turn", tag_name(*kind)));
                return;
            }
        }
    }
    if !answers.is_empty() && state != State::AfterAnswer {
        p.issue(p.raw.len(), IssueCode::BadSequence, "trace ends mid-sequence");
    }
}

fn check_retrieval(p: &mut Parser<'_>, trace: &ReasoningTrace, starts: &[usize]) {
    if trace.search_count() == 0 {
        p.issue(0, IssueCode::NoSearch, "no search turn");
        return;
    }
    for (i, turn) in trace.turns.iter().enumerate() {
        let Turn::Search(qs) = turn else { continue };
        match trace.turns.get(i + 1) {
            Some(Turn::Information(groups)) if groups.len() == qs.len() => {}
            Some(Turn::Information(groups)) => p.issue(
                starts[i + 1],
                IssueCode::MisalignedInformation,
                format!("{} subqueries but {} document groups", qs.len(), groups.len()),
            ),
            _ => p.issue(starts[i], IssueCode::SearchWithoutInformation, "search not followed by information"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_LEAF: &str = "<think> decompose into sub-queries </think>\n\
<search> How many branches does CITIC bank have? ## How many branches does UniCredit have? </search>\n\
<information> Doc 1(Title: \"CITIC Bank\") operates 78 branches on the mainland, and 622 sub-branches. 773 total offices. \
## Doc 1(Title: \"UniCredit\") network spans 50 markets in 17 countries, with more than 8,500 branches. </information>\n\
<think> CITIC: 773 branches UniCredit: 8,500 branches </think>\n\
<answer> UniCredit </answer>";

    #[test]
    fn split_examples() {
        assert_eq!(split_subqueries("a ## b"), vec!["a", "b"]);
        assert_eq!(split_subqueries("only one query"), vec!["only one query"]);
        assert_eq!(split_subqueries(" x ## ## y "), vec!["x", "y"]);
    }

    #[test]
    fn figure_one_trace_is_well_formed() {
        let r = parse_trace(TWO_LEAF, "Which bank has more branches, CITIC or UniCredit?");
        assert!(r.f_format, "{:?}", r.issues);
        assert!(r.f_retrieval);
        assert_eq!(r.trace.turns.len(), 5);
        match &r.trace.turns[1] {
            Turn::Search(q) => assert_eq!(q.len(), 2),
            t => panic!("{t:?}"),
        }
        match &r.trace.turns[2] {
            Turn::Information(g) => {
                assert_eq!(g.len(), 2);
                assert_eq!(g[1][0].title, "UniCredit");
            }
            t => panic!("{t:?}"),
        }
        assert_eq!(r.trace.answer.as_deref(), Some("UniCredit"));
    }

    #[test]
    fn answer_without_think_fails_format() {
        let r = parse_trace("<answer> Beijing </answer>", "q");
        assert!(!r.f_format);
        assert!(!r.f_retrieval);
        assert!(r.has(IssueCode::BadSequence));
    }

    #[test]
    fn misaligned_groups_keep_format_drop_retrieval() {
        let raw = "<think>t</think><search>a ## b</search><information>Doc 1(Title: x) y</information><think>t</think><answer>z</answer>";
        let r = parse_trace(raw, "q");
        assert!(r.f_format);
        assert!(!r.f_retrieval);
        assert!(r.has(IssueCode::MisalignedInformation));
    }

    #[test]
    fn no_search_is_format_only() {
        let r = parse_trace("<think>I know this</think><answer>Paris</answer>", "q");
        assert!(r.f_format);
        assert!(!r.f_retrieval);
    }

    #[test]
    fn empty_input() {
        let r = parse_trace("", "q");
        assert!(!r.f_format && !r.f_retrieval);
        assert!(r.trace.turns.is_empty());
        assert!(r.has(IssueCode::MissingAnswer));
    }

    #[test]
    fn tags_are_case_sensitive() {
        let r = parse_trace("<Think>x</Think><think>y</think><answer>a</answer>", "q");
        assert!(r.f_format);
        assert!(r.has(IssueCode::StrayText));
        assert_eq!(r.trace.turns.len(), 2);
    }

    #[test]
    fn nested_and_unclosed_tags() {
        let r = parse_trace("<think>a<think>b</think><answer>c", "q");
        assert!(!r.f_format);
        assert!(r.has(IssueCode::NestedTag));
        assert!(r.has(IssueCode::UnclosedTag));
        assert_eq!(r.trace.answer.as_deref(), Some("c"));
    }

    #[test]
    fn stray_close_and_mismatch() {
        let r = parse_trace("</search><think>a</answer></think><answer>b</answer>", "q");
        assert!(r.has(IssueCode::UnmatchedClose));
        assert!(r.has(IssueCode::MismatchedClose));
        assert!(!r.f_format);
    }

    #[test]
    fn connective_prose_is_cosmetic() {
        let r = parse_trace("<think>a</think> so then <answer>b</answer> bye", "q");
        assert!(r.f_format);
        assert_eq!(r.issues.iter().filter(|i| i.code == IssueCode::StrayText).count(), 2);
    }

    #[test]
    fn search_must_be_followed_by_information() {
        let r = parse_trace("<think>a</think><search>q</search><think>b</think><answer>c</answer>", "q");
        assert!(!r.f_format);
        assert!(r.has(IssueCode::BadSequence));
    }

    #[test]
    fn answer_not_final_and_multiple() {
        let r = parse_trace("<think>a</think><answer>b</answer><think>c</think>", "q");
        assert!(r.has(IssueCode::AnswerNotFinal));
        let r = parse_trace("<think>a</think><answer>b</answer><think>c</think><answer>d</answer>", "q");
        assert!(r.has(IssueCode::MultipleAnswers));
        assert!(!r.f_format);
    }

    #[test]
    fn four_subqueries_flagged_but_format_holds() {
        let raw = "<think>t</think><search>a ## b ## c ## d</search><information>1 ## 2 ## 3 ## 4</information><think>t</think><answer>z</answer>";
        let r = parse_trace(raw, "q");
        assert!(r.f_format && r.f_retrieval);
        assert!(r.has(IssueCode::TooManySubqueries));
    }

    #[test]
    fn doc_group_headers() {
        let (docs, stray) = parse_doc_group(
            r#" Doc 1(Title: "Dennis Allen (criminal)") in 1985. Doc 2(Title: UniCredit) UniCredit S.p.A. "#,
        );
        assert!(!stray);
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].title, "Dennis Allen (criminal)");
        assert_eq!(docs[0].body, "in 1985.");
        assert_eq!(docs[1].title, "UniCredit");
        assert_eq!(docs[1].body, "UniCredit S.p.A.");
    }

    #[test]
    fn headerless_group_is_one_doc() {
        let (docs, _) = parse_doc_group("  plain text  ");
        assert_eq!(docs, vec![RetrievedDoc::new("", "plain text")]);
        assert!(parse_doc_group("   ").0.is_empty());
    }
}
