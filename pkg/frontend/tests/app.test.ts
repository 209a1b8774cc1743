import { beforeEach, describe, expect, it, vi } from "vitest";
import { ApiError, PairView, Side, SurveyService } from "../src/api.js";
import { SurveyApp } from "../src/app.js";

function pair(id: string, dataset = "scenes"): PairView {
  return {
    pair_id: id,
    dataset,
    left_url: `/api/image/${id}-l`,
    right_url: `/api/image/${id}-r`,
  };
}

class FakeApi implements SurveyService {
  served = 0;
  votes: Array<{ pair_id: string; side: Side }> = [];
  failNextVotes = 0;
  constructor(
    private readonly sets: string[],
    private readonly pairs: PairView[],
  ) {}

  async datasets(): Promise<string[]> {
    return this.sets;
  }

  async nextPair(_dataset: string): Promise<PairView | null> {
    if (this.served >= this.pairs.length) {
      return null;
    }
    return this.pairs[this.served++];
  }

  async vote(pairId: string, side: Side): Promise<void> {
    if (this.failNextVotes > 0) {
      this.failNextVotes -= 1;
      throw new ApiError(409, "this session already voted on that pair");
    }
    this.votes.push({ pair_id: pairId, side });
  }
}

/** Let queued microtasks and zero-delay timers run. */
async function settle(): Promise<void> {
  for (let i = 0; i < 8; i += 1) {
    await Promise.resolve();
  }
  await new Promise((resolve) => setTimeout(resolve, 0));
}

function cellFor(root: HTMLElement, side: Side): HTMLButtonElement {
  const cell = root.querySelector<HTMLButtonElement>(`[data-side="${side}"]`);
  expect(cell).not.toBeNull();
  return cell!;
}

let root: HTMLElement;

beforeEach(() => {
  document.body.innerHTML = '<div id="app"></div>';
  root = document.getElementById("app")!;
});

describe("pair flow", () => {
  it("shows both candidates as equally sized selectable cells", async () => {
    const api = new FakeApi(["scenes"], [pair("p1")]);
    await new SurveyApp(api, root).start();
    await settle();

    const cells = root.querySelectorAll("button.cell");
    expect(cells).toHaveLength(2);
    const imgs = root.querySelectorAll("img");
    expect(imgs).toHaveLength(2);
    expect(imgs[0].getAttribute("src")).toBe("/api/image/p1-l");
    expect(imgs[1].getAttribute("src")).toBe("/api/image/p1-r");
  });

  it("submits the clicked side and waits for the ack before advancing", async () => {
    const api = new FakeApi(["scenes"], [pair("p1"), pair("p2")]);
    const app = new SurveyApp(api, root);
    await app.start();
    await settle();

    cellFor(root, "right").click();
    await settle();

    expect(api.votes).toEqual([{ pair_id: "p1", side: "right" }]);
    expect(app.votesSubmitted).toBe(1);
    // advanced to the second pair only after the ack
    expect(root.querySelector("img")?.getAttribute("src")).toBe(
      "/api/image/p2-l",
    );
  });

  it("ignores a double click: one pair, at most one POST", async () => {
    const api = new FakeApi(["scenes"], [pair("p1"), pair("p2")]);
    const app = new SurveyApp(api, root);
    await app.start();
    await settle();

    const left = cellFor(root, "left");
    left.click();
    left.click();
    cellFor(root, "right").click();
    await settle();

    expect(api.votes).toHaveLength(1);
    expect(api.votes[0]).toEqual({ pair_id: "p1", side: "left" });
    expect(app.votesSubmitted).toBe(1);
  });

  it("keeps the submitted-votes counter equal to the acks received", async () => {
    const api = new FakeApi(["scenes"], [pair("a"), pair("b"), pair("c")]);
    const app = new SurveyApp(api, root);
    await app.start();
    await settle();

    for (const side of ["left", "right", "left"] as const) {
      cellFor(root, side).click();
      await settle();
    }
    expect(app.votesSubmitted).toBe(api.votes.length);
    expect(app.votesSubmitted).toBe(3);
  });
});

describe("broken images", () => {
  it("skips a pair whose image fails to load, without voting", async () => {
    const api = new FakeApi(["scenes"], [pair("bad"), pair("good")]);
    const warn = vi.spyOn(console, "warn").mockImplementation(() => {});
    const app = new SurveyApp(api, root);
    await app.start();
    await settle();

    root.querySelectorAll("img")[0].dispatchEvent(new Event("error"));
    await settle();

    expect(warn).toHaveBeenCalledOnce();
    expect(api.votes).toHaveLength(0);
    expect(api.served).toBe(2);
    expect(root.querySelector("img")?.getAttribute("src")).toBe(
      "/api/image/good-l",
    );
    warn.mockRestore();
  });

  it("skips only once even when both images of a pair fail", async () => {
    const api = new FakeApi(["scenes"], [pair("bad"), pair("good")]);
    const warn = vi.spyOn(console, "warn").mockImplementation(() => {});
    await new SurveyApp(api, root).start();
    await settle();

    const imgs = root.querySelectorAll("img");
    imgs[0].dispatchEvent(new Event("error"));
    imgs[1].dispatchEvent(new Event("error"));
    await settle();

    expect(api.served).toBe(2);
    warn.mockRestore();
  });
});

describe("completion", () => {
  it("shows the vote count once the pool is exhausted", async () => {
    const api = new FakeApi(["scenes"], [pair("p1"), pair("p2")]);
    const app = new SurveyApp(api, root);
    await app.start();
    await settle();

    cellFor(root, "left").click();
    await settle();
    cellFor(root, "right").click();
    await settle();

    expect(app.phase).toBe("done");
    expect(root.textContent).toContain("You cast 2 votes");
  });

  it("pluralises correctly for a single vote", async () => {
    const api = new FakeApi(["scenes"], [pair("p1")]);
    const app = new SurveyApp(api, root);
    await app.start();
    await settle();
    cellFor(root, "left").click();
    await settle();
    expect(root.textContent).toContain("You cast 1 vote ");
  });
});

describe("vote rejection", () => {
  it("offers retry, and a retry can succeed", async () => {
    const api = new FakeApi(["scenes"], [pair("p1"), pair("p2")]);
    api.failNextVotes = 1;
    const app = new SurveyApp(api, root);
    await app.start();
    await settle();

    cellFor(root, "left").click();
    await settle();

    expect(root.textContent).toContain("did not go through");
    const retry = root.querySelector<HTMLButtonElement>('[data-action="retry"]');
    expect(retry).not.toBeNull();
    retry!.click();
    await settle();

    expect(api.votes).toEqual([{ pair_id: "p1", side: "left" }]);
    expect(app.votesSubmitted).toBe(1);
  });

  it("offers skip, which advances without recording a vote", async () => {
    const api = new FakeApi(["scenes"], [pair("p1"), pair("p2")]);
    api.failNextVotes = 99;
    const app = new SurveyApp(api, root);
    await app.start();
    await settle();

    cellFor(root, "right").click();
    await settle();
    const skip = root.querySelector<HTMLButtonElement>('[data-action="skip"]');
    expect(skip).not.toBeNull();
    skip!.click();
    await settle();

    expect(api.votes).toHaveLength(0);
    expect(app.votesSubmitted).toBe(0);
    expect(root.querySelector("img")?.getAttribute("src")).toBe(
      "/api/image/p2-l",
    );
  });
});

describe("dataset picker", () => {
  it("lists the available sets and starts the chosen one", async () => {
    const api = new FakeApi(["animals", "rooms"], [pair("p1", "rooms")]);
    const app = new SurveyApp(api, root);
    await app.start();
    await settle();

    const buttons = [...root.querySelectorAll<HTMLButtonElement>(".choice")];
    expect(buttons.map((b) => b.textContent)).toEqual(["animals", "rooms"]);
    buttons[1].click();
    await settle();
    expect(root.querySelectorAll(".cell")).toHaveLength(2);
  });

  it("starts straight away when there is only one set", async () => {
    const api = new FakeApi(["scenes"], [pair("p1")]);
    await new SurveyApp(api, root).start();
    await settle();
    expect(root.querySelectorAll(".cell")).toHaveLength(2);
  });
});

describe("anonymity", () => {
  it("never renders model names in any phase of the flow", async () => {
    const leak = /\b(baseline|ours)\b/i;
    const api = new FakeApi(["scenes"], [pair("p1")]);
    const app = new SurveyApp(api, root);
    await app.start();
    await settle();
    expect(root.innerHTML).not.toMatch(leak);

    cellFor(root, "left").click();
    await settle();
    expect(app.phase).toBe("done");
    expect(root.innerHTML).not.toMatch(leak);
  });
});
