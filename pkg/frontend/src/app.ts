import { ApiError, PairView, Side, SurveyService } from "./api.js";

type Phase =
  | "boot"
  | "picking"
  | "loading"
  | "pair"
  | "submitting"
  | "trouble"
  | "done";

/** Build an element with a class and optional text, because this app is too
 *  small to earn a framework. */
function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  node.className = className;
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}

/**
 * The survey flow as a small state machine over plain DOM.
 *
 * Rules the rest of the code bends around:
 *  - a vote is never counted until the service acknowledges it, and the pair
 *    stays on screen (buttons disabled) while the POST is in flight;
 *  - a second click on the same pair is a no-op, so one pair produces at
 *    most one POST;
 *  - a pair whose image fails to load is skipped, not voted on.
 */
export class SurveyApp {
  /** Acknowledged votes only; must track the service's own log. */
  votesSubmitted = 0;
  phase: Phase = "boot";

  private dataset = "";
  private current: PairView | null = null;
  private skipPending = false;

  constructor(
    private readonly api: SurveyService,
    private readonly root: HTMLElement,
  ) {}

  async start(): Promise<void> {
    let names: string[];
    try {
      names = await this.api.datasets();
    } catch (error) {
      this.renderFatal(describe(error));
      return;
    }
    if (names.length === 0) {
      this.renderFatal("No image sets are available yet.");
      return;
    }
    if (names.length === 1) {
      await this.beginDataset(names[0]);
      return;
    }
    this.renderPicker(names);
  }

  async beginDataset(name: string): Promise<void> {
    this.dataset = name;
    await this.advance();
  }

  /** Fetch the next pair; on 204 show the completion screen. */
  private async advance(): Promise<void> {
    this.phase = "loading";
    this.renderNotice("Fetching the next pair…");
    let view: PairView | null;
    try {
      view = await this.api.nextPair(this.dataset);
    } catch (error) {
      this.phase = "trouble";
      this.renderTrouble(
        describe(error),
        () => void this.advance(),
        null,
      );
      return;
    }
    if (view === null) {
      this.renderDone();
      return;
    }
    this.current = view;
    this.skipPending = false;
    this.renderPair(view);
  }

  /** Record a choice. Re-entry while a POST is in flight is ignored. */
  async choose(side: Side): Promise<void> {
    if (this.phase !== "pair" || this.current === null) {
      return;
    }
    const view = this.current;
    this.phase = "submitting";
    this.setCellsEnabled(false);
    await this.submit(view, side);
  }

  private async submit(view: PairView, side: Side): Promise<void> {
    try {
      await this.api.vote(view.pair_id, side);
    } catch (error) {
      this.phase = "trouble";
      this.renderTrouble(
        describe(error),
        () => void this.submit(view, side),
        () => void this.advance(),
      );
      return;
    }
    this.votesSubmitted += 1;
    await this.advance();
  }

  /** A broken image invalidates the whole comparison: log it and move on. */
  private onImageTrouble(side: Side): void {
    if (this.skipPending || this.phase !== "pair") {
      return;
    }
    this.skipPending = true;
    const id = this.current?.pair_id ?? "?";
    console.warn(`image failed to load (${side} of pair ${id}); skipping`);
    void this.advance();
  }

  // --- rendering ---------------------------------------------------------

  private clear(): HTMLElement {
    this.root.textContent = "";
    const header = el("header", "masthead");
    header.append(el("h1", "", "Which image looks more realistic?"));
    this.root.append(header);
    return this.root;
  }

  private renderPicker(names: string[]): void {
    this.phase = "picking";
    const root = this.clear();
    const panel = el("section", "panel");
    panel.append(el("p", "", "Pick an image set to judge:"));
    const list = el("div", "choices");
    for (const name of names) {
      const button = el("button", "choice", name);
      button.addEventListener("click", () => void this.beginDataset(name));
      list.append(button);
    }
    panel.append(list);
    root.append(panel);
  }

  private renderPair(view: PairView): void {
    this.phase = "pair";
    const root = this.clear();

    const stage = el("section", "pair");
    for (const side of ["left", "right"] as const) {
      const cell = el("button", "cell");
      cell.dataset.side = side;
      cell.setAttribute("aria-label", `pick the ${side} image`);
      const img = document.createElement("img");
      img.alt = `candidate image, ${side} side`;
      img.addEventListener("error", () => this.onImageTrouble(side));
      img.src = side === "left" ? view.left_url : view.right_url;
      cell.append(img);
      cell.addEventListener("click", () => void this.choose(side));
      stage.append(cell);
    }
    root.append(stage);

    root.append(
      el("p", "hint", "Click the image that looks more realistic to you."),
    );
    root.append(this.statusBar(view.dataset));
  }

  private renderDone(): void {
    this.phase = "done";
    const root = this.clear();
    const panel = el("section", "panel done");
    panel.append(el("h2", "", "All done"));
    const n = this.votesSubmitted;
    panel.append(
      el("p", "", `You cast ${n} ${n === 1 ? "vote" : "votes"} — thank you!`),
    );
    panel.append(
      el("p", "fineprint", "There are no more pairs left for this session."),
    );
    root.append(panel);
  }

  private renderNotice(message: string): void {
    const root = this.clear();
    root.append(el("p", "notice", message));
  }

  private renderTrouble(
    message: string,
    retry: () => void,
    skip: (() => void) | null,
  ): void {
    const root = this.clear();
    const panel = el("section", "panel trouble");
    panel.append(el("p", "", `That did not go through: ${message}`));
    const row = el("div", "choices");
    const again = el("button", "choice", "Try again");
    again.dataset.action = "retry";
    again.addEventListener("click", retry);
    row.append(again);
    if (skip !== null) {
      const next = el("button", "choice", "Skip this pair");
      next.dataset.action = "skip";
      next.addEventListener("click", skip);
      row.append(next);
    }
    panel.append(row);
    root.append(panel);
  }

  private renderFatal(message: string): void {
    this.phase = "trouble";
    const root = this.clear();
    root.append(el("p", "notice", message));
  }

  private statusBar(dataset: string): HTMLElement {
    const bar = el("footer", "status");
    bar.append(el("span", "", `set: ${dataset}`));
    bar.append(el("span", "", `votes cast: ${this.votesSubmitted}`));
    return bar;
  }

  private setCellsEnabled(enabled: boolean): void {
    for (const cell of this.root.querySelectorAll<HTMLButtonElement>(".cell")) {
      cell.disabled = !enabled;
    }
  }
}

function describe(error: unknown): string {
  if (error instanceof ApiError) {
    return `the service answered ${error.status} (${error.message})`;
  }
  return "the service could not be reached";
}
