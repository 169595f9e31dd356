"""
SQLite store of pipeline runs and evaluation reports
"""

import json
import logging
import sqlite3
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

logger = logging.getLogger(__name__)


class ResultsStore:
    """Manages SQLite storage of stage runs and eval reports"""

    def __init__(self, db_path: str = "artifacts/results.db"):
        self.db_path = str(db_path)
        if self.db_path != ":memory:":
            Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
        self.init_database()

    def init_database(self):
        """Initialize database with required tables"""
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()

                cursor.execute(
                    """
                    CREATE TABLE IF NOT EXISTS runs (
                        id INTEGER PRIMARY KEY AUTOINCREMENT,
                        artifact_dir TEXT NOT NULL,
                        stage TEXT NOT NULL,
                        status TEXT NOT NULL,  -- 'ok', 'skipped', 'failed'
                        config_digest TEXT,
                        seed INTEGER,
                        seconds REAL,
                        message TEXT,
                        created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
                    )
                """
                )

                cursor.execute(
                    """
                    CREATE TABLE IF NOT EXISTS eval_reports (
                        id INTEGER PRIMARY KEY AUTOINCREMENT,
                        artifact_dir TEXT NOT NULL,
                        model_id TEXT NOT NULL,
                        seed INTEGER,
                        fd_mean REAL, fd_std REAL,
                        kl_mean REAL, kl_std REAL,
                        clap_mean REAL, clap_std REAL,
                        config_digest TEXT,
                        report TEXT,  -- JSON string
                        wall_time REAL,
                        created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
                    )
                """
                )

                conn.commit()
                logger.info("Results database initialized")

        except Exception as e:
            logger.error(f"Error initializing results database: {e}")
            raise

    def record_run(
        self,
        artifact_dir: str,
        stage: str,
        status: str,
        config_digest: str = "",
        seed: Optional[int] = None,
        seconds: Optional[float] = None,
        message: str = "",
    ) -> int:
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()
                cursor.execute(
                    """
                    INSERT INTO runs (artifact_dir, stage, status, config_digest, seed, seconds, message, created_at)
                    VALUES (?, ?, ?, ?, ?, ?, ?, ?)
                """,
                    (
                        str(artifact_dir),
                        stage,
                        status,
                        config_digest,
                        seed,
                        seconds,
                        message,
                        datetime.now().isoformat(),
                    ),
                )
                conn.commit()
                return cursor.lastrowid
        except Exception as e:
            logger.error(f"Error recording run for stage {stage}: {e}")
            raise

    def save_report(
        self, artifact_dir: str, report: Dict[str, Any], seed: Optional[int] = None, wall_time: Optional[float] = None
    ) -> int:
        """Store one evaluation report (as produced by EvalReport.to_dict)"""
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()
                cursor.execute(
                    """
                    INSERT INTO eval_reports (
                        artifact_dir, model_id, seed, fd_mean, fd_std, kl_mean, kl_std,
                        clap_mean, clap_std, config_digest, report, wall_time, created_at
                    ) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
                """,
                    (
                        str(artifact_dir),
                        report["model_id"],
                        seed,
                        report["fd_mean"],
                        report["fd_std"],
                        report["kl_mean"],
                        report["kl_std"],
                        report["clap_mean"],
                        report["clap_std"],
                        report.get("config_digest", ""),
                        json.dumps(report, sort_keys=True),
                        wall_time,
                        datetime.now().isoformat(),
                    ),
                )
                conn.commit()
                return cursor.lastrowid
        except Exception as e:
            logger.error(f"Error saving report {report.get('model_id')}: {e}")
            raise

    def get_runs(self, artifact_dir: Optional[str] = None) -> List[Dict[str, Any]]:
        try:
            with sqlite3.connect(self.db_path) as conn:
                conn.row_factory = sqlite3.Row
                cursor = conn.cursor()
                if artifact_dir:
                    cursor.execute(
                        "SELECT * FROM runs WHERE artifact_dir = ? ORDER BY id", (str(artifact_dir),)
                    )
                else:
                    cursor.execute("SELECT * FROM runs ORDER BY id")
                return [dict(row) for row in cursor.fetchall()]
        except Exception as e:
            logger.error(f"Error reading runs: {e}")
            return []

    def get_reports(self, artifact_dir: Optional[str] = None) -> List[Dict[str, Any]]:
        try:
            with sqlite3.connect(self.db_path) as conn:
                conn.row_factory = sqlite3.Row
                cursor = conn.cursor()
                if artifact_dir:
                    cursor.execute(
                        "SELECT * FROM eval_reports WHERE artifact_dir = ? ORDER BY id", (str(artifact_dir),)
                    )
                else:
                    cursor.execute("SELECT * FROM eval_reports ORDER BY id")
                reports = []
                for row in cursor.fetchall():
                    item = dict(row)
                    item["report"] = json.loads(item["report"]) if item["report"] else {}
                    reports.append(item)
                return reports
        except Exception as e:
            logger.error(f"Error reading eval reports: {e}")
            return []

    def reports_dataframe(self, artifact_dir: Optional[str] = None) -> pd.DataFrame:
        """Eval reports as a DataFrame, newest report per (artifact dir, model)"""
        try:
            rows = self.get_reports(artifact_dir)
            if not rows:
                return pd.DataFrame()
            df = pd.DataFrame(rows).drop(columns=["report"])
            return df.drop_duplicates(subset=["artifact_dir", "model_id"], keep="last").reset_index(drop=True)
        except Exception as e:
            logger.error(f"Error exporting reports to DataFrame: {e}")
            return pd.DataFrame()

    def runs_dataframe(self, artifact_dir: Optional[str] = None) -> pd.DataFrame:
        return pd.DataFrame(self.get_runs(artifact_dir))
