import { EditorApp } from "./app.js";

new EditorApp(document);
