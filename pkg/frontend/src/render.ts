/** DOM builders for transcript turns.
 *
 * Everything is assembled with createElement and textContent, so answer text
 * is always inert. Only the public answer fields (text, route, citations,
 * fallback flag) are ever rendered; anything else on a turn is ignored.
 */

import type { AnswerView, CitationRef, TranscriptTurn } from "./api.js";

const ROUTE_LABELS: Record<string, string> = {
  LectureRAG: "Lecture",
  AssignmentGuarded: "Assignment",
  ExamPrepDecompose: "Exam prep",
};

const CODE_KEYWORDS = [
  "def", "return", "if", "elif", "else", "for", "while", "class", "import",
  "from", "lambda", "const", "let", "var", "function", "new", "async", "await",
];

const KEYWORD_SPLIT = new RegExp(`\\b(${CODE_KEYWORDS.join("|")})\\b`);
const FENCE_OPEN = /^```[^\n]*$/;

export function routeLabel(route: string | undefined): string | null {
  if (!route) return null;
  return ROUTE_LABELS[route] ?? null;
}

interface Segment {
  kind: "text" | "code";
  body: string;
}

/** Split answer text into prose and fenced code segments. */
export function splitSegments(text: string): Segment[] {
  const segments: Segment[] = [];
  const lines = text.split("\n");
  let buffer: string[] = [];
  let inCode = false;
  const flush = (kind: Segment["kind"]) => {
    const body = buffer.join("\n");
    if (body.trim().length > 0) segments.push({ kind, body });
    buffer = [];
  };
  for (const line of lines) {
    if (!inCode && FENCE_OPEN.test(line)) {
      flush("text");
      inCode = true;
    } else if (inCode && line.trim() === "```") {
      flush("code");
      inCode = false;
    } else {
      buffer.push(line);
    }
  }
  flush(inCode ? "code" : "text");
  return segments;
}

function appendHighlighted(code: HTMLElement, body: string): void {
  for (const piece of body.split(KEYWORD_SPLIT)) {
    if (piece === "") continue;
    if (CODE_KEYWORDS.includes(piece)) {
      const span = document.createElement("span");
      span.className = "kw";
      span.textContent = piece;
      code.appendChild(span);
    } else {
      code.appendChild(document.createTextNode(piece));
    }
  }
}

function renderBody(text: string, highlightCode: boolean): HTMLElement {
  const body = document.createElement("div");
  body.className = "turn-body";
  for (const segment of splitSegments(text)) {
    if (segment.kind === "code") {
      const pre = document.createElement("pre");
      const code = document.createElement("code");
      code.className = "code-block";
      if (highlightCode) {
        appendHighlighted(code, segment.body);
      } else {
        code.textContent = segment.body;
      }
      pre.appendChild(code);
      body.appendChild(pre);
    } else {
      for (const para of segment.body.split(/\n{2,}/)) {
        if (!para.trim()) continue;
        const p = document.createElement("p");
        p.textContent = para;
        body.appendChild(p);
      }
    }
  }
  return body;
}

function renderCitations(citations: CitationRef[]): HTMLElement {
  const details = document.createElement("details");
  details.className = "citations";
  const summary = document.createElement("summary");
  summary.textContent =
    citations.length === 1 ? "1 source" : `${citations.length} sources`;
  details.appendChild(summary);
  const list = document.createElement("ul");
  for (const ref of citations) {
    const item = document.createElement("li");
    item.className = "source-chip";
    item.textContent = `${ref.title} · #${ref.seq}`;
    list.appendChild(item);
  }
  details.appendChild(list);
  return details;
}

function banner(className: string, message: string): HTMLElement {
  const div = document.createElement("div");
  div.className = `banner ${className}`;
  div.textContent = message;
  return div;
}

export function renderTurn(turn: TranscriptTurn): HTMLElement {
  const article = document.createElement("article");
  article.className = `turn ${turn.role}`;
  if (turn.role === "user") {
    article.appendChild(renderBody(turn.text, false));
    return article;
  }

  const meta = turn.answer_meta ?? {};
  const label = routeLabel(meta.route);
  if (label) {
    const badge = document.createElement("span");
    badge.className = "route-badge";
    badge.dataset.route = meta.route ?? "";
    badge.textContent = label;
    article.appendChild(badge);
  }
  if (meta.route === "AssignmentGuarded") {
    article.appendChild(
      banner("policy", "Solutions are withheld by course policy; answers give hints."),
    );
  }
  if (meta.fallback_used) {
    article.appendChild(
      banner("hints-only", "Hints only: the tutor declined to go further on this one."),
    );
  }
  article.appendChild(renderBody(turn.text, meta.route === "LectureRAG"));
  if (meta.citations && meta.citations.length > 0) {
    article.appendChild(renderCitations(meta.citations));
  }
  return article;
}

export function answerToTurn(answer: AnswerView): TranscriptTurn {
  return {
    role: "assistant",
    text: answer.text,
    answer_meta: {
      route: answer.route,
      citations: answer.citations,
      fallback_used: answer.fallback_used,
    },
  };
}

export function renderPending(): HTMLElement {
  const article = document.createElement("article");
  article.className = "turn assistant pending";
  const dots = document.createElement("span");
  dots.className = "spinner";
  dots.textContent = "…";
  article.appendChild(dots);
  return article;
}
