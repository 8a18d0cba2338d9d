import { TutorClient } from "./api.js";
import { ChatApp } from "./app.js";

const root = document.getElementById("app");
if (root) {
  void new ChatApp(root, new TutorClient()).init();
}
