import { SurveyApi } from "./api.js";
import { SurveyApp } from "./app.js";

const root = document.getElementById("app");
if (root === null) {
  throw new Error("missing #app mount point");
}
void new SurveyApp(new SurveyApi(), root).start();
