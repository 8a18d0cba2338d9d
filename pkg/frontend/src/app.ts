/** Single-page chat app wired to the tutor service. */

import { ServiceBusy, TutorClient } from "./api.js";
import { answerToTurn, renderPending, renderTurn } from "./render.js";

export function parseSessionHash(hash: string): string | null {
  const match = /^#session=(.+)$/.exec(hash);
  return match ? decodeURIComponent(match[1]) : null;
}

export class ChatApp {
  private readonly root: HTMLElement;
  private readonly client: TutorClient;
  private sessionId: string | null = null;
  private inFlight = false;

  private courseSelect!: HTMLSelectElement;
  private transcriptEl!: HTMLElement;
  private form!: HTMLFormElement;
  private input!: HTMLTextAreaElement;
  private sendButton!: HTMLButtonElement;
  private noticeEl!: HTMLElement;

  constructor(root: HTMLElement, client: TutorClient) {
    this.root = root;
    this.client = client;
  }

  async init(): Promise<void> {
    this.buildSkeleton();
    try {
      const courses = await this.client.listCourses();
      for (const course of courses) {
        const option = document.createElement("option");
        option.value = course.course_id;
        option.textContent = course.title;
        this.courseSelect.appendChild(option);
      }
    } catch (err) {
      this.showNotice(`Could not load courses: ${describe(err)}`);
      return;
    }
    const sessionId = parseSessionHash(window.location.hash);
    if (sessionId) {
      try {
        await this.restore(sessionId);
      } catch (err) {
        this.showNotice(`Could not restore session: ${describe(err)}`);
      }
    }
  }

  private buildSkeleton(): void {
    this.root.textContent = "";

    const header = document.createElement("header");
    header.className = "chat-header";
    const title = document.createElement("h1");
    title.textContent = "Course Tutor";
    header.appendChild(title);
    this.courseSelect = document.createElement("select");
    this.courseSelect.className = "course-select";
    this.courseSelect.setAttribute("aria-label", "Course");
    header.appendChild(this.courseSelect);
    this.root.appendChild(header);

    this.noticeEl = document.createElement("div");
    this.noticeEl.className = "notice";
    this.noticeEl.hidden = true;
    this.root.appendChild(this.noticeEl);

    this.transcriptEl = document.createElement("main");
    this.transcriptEl.className = "transcript";
    this.root.appendChild(this.transcriptEl);

    this.form = document.createElement("form");
    this.form.className = "composer";
    this.input = document.createElement("textarea");
    this.input.className = "composer-input";
    this.input.rows = 2;
    this.input.placeholder = "Ask about this course";
    this.form.appendChild(this.input);
    this.sendButton = document.createElement("button");
    this.sendButton.type = "submit";
    this.sendButton.textContent = "Send";
    this.form.appendChild(this.sendButton);
    this.form.addEventListener("submit", (event) => {
      event.preventDefault();
      void this.submit();
    });
    this.input.addEventListener("keydown", (event) => {
      if (event.key === "Enter" && !event.shiftKey) {
        event.preventDefault();
        void this.submit();
      }
    });
    this.root.appendChild(this.form);
  }

  private async restore(sessionId: string): Promise<void> {
    const view = await this.client.getSession(sessionId);
    this.sessionId = view.session_id;
    this.courseSelect.value = view.course_id;
    this.courseSelect.disabled = true;
    for (const turn of view.transcript) {
      this.transcriptEl.appendChild(renderTurn(turn));
    }
  }

  private async submit(): Promise<void> {
    const text = this.input.value;
    if (!text.trim() || this.inFlight) return;
    await this.sendText(text);
  }

  private async sendText(text: string): Promise<void> {
    this.clearNotice();
    this.inFlight = true;
    this.setComposerDisabled(true);
    const bubble = renderTurn({ role: "user", text });
    this.transcriptEl.appendChild(bubble);
    const pending = renderPending();
    this.transcriptEl.appendChild(pending);
    this.input.value = "";
    try {
      if (!this.sessionId) {
        const session = await this.client.createSession(this.courseSelect.value);
        this.sessionId = session.session_id;
        this.courseSelect.disabled = true;
        window.location.hash = `#session=${encodeURIComponent(session.session_id)}`;
      }
      const answer = await this.client.ask(this.sessionId, text);
      pending.remove();
      this.transcriptEl.appendChild(renderTurn(answerToTurn(answer)));
      this.inFlight = false;
      this.setComposerDisabled(false);
      this.input.focus();
    } catch (err) {
      // roll back the optimistic bubble so the transcript stays in step
      // with what the server actually recorded
      pending.remove();
      bubble.remove();
      this.input.value = text;
      this.inFlight = false;
      if (err instanceof ServiceBusy) {
        this.showNotice(
          `The tutor is busy right now; you can send again in ${err.retryAfterSeconds}s.`,
        );
        window.setTimeout(() => {
          this.setComposerDisabled(false);
          this.clearNotice();
        }, err.retryAfterSeconds * 1000);
      } else {
        this.setComposerDisabled(false);
        this.showNotice(`Could not send: ${describe(err)}`, () => {
          void this.sendText(text);
        });
      }
    }
  }

  private setComposerDisabled(disabled: boolean): void {
    this.input.disabled = disabled;
    this.sendButton.disabled = disabled;
  }

  private showNotice(message: string, retry?: () => void): void {
    this.noticeEl.textContent = message;
    if (retry) {
      const button = document.createElement("button");
      button.type = "button";
      button.className = "retry";
      button.textContent = "Retry";
      button.addEventListener("click", retry);
      this.noticeEl.appendChild(button);
    }
    this.noticeEl.hidden = false;
  }

  private clearNotice(): void {
    this.noticeEl.textContent = "";
    this.noticeEl.hidden = true;
  }
}

function describe(err: unknown): string {
  return err instanceof Error ? err.message : String(err);
}
