import { ApiClient } from "./api";
import { Workbench } from "./ui";

const base = new URLSearchParams(window.location.search).get("api") ?? "";
const client = new ApiClient(base, (url, init) => fetch(url, init));
const root = document.getElementById("app");
if (root) {
  void new Workbench(root, client).start();
}
