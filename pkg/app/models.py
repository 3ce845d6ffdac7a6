from datetime import datetime, timezone
from typing import Any, Dict, Optional
import json
import logging
from app.extensions import db

logger = logging.getLogger(__name__)


def _utcnow() -> datetime:
    return datetime.now(timezone.utc).replace(tzinfo=None)


def _load_json(text: Optional[str], what: str, run_id) -> Dict[str, Any]:
    if not text:
        return {}
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        logger.error(f"解析运行 {run_id} 的 {what} 失败: {e}")
        return {}


class Run(db.Model):
    """一次命令行运行的清单: 命令回显、输入哈希、配置快照和工具版本。"""
    id = db.Column(db.Integer, primary_key=True)
    command = db.Column(db.String(32), nullable=False, index=True)   # simulate / separate / evaluate / features
    arguments_json = db.Column(db.Text, nullable=True)               # 命令参数回显
    input_hashes_json = db.Column(db.Text, nullable=True)            # {路径: sha256}
    config_json = db.Column(db.Text, nullable=True)                  # 信号与处理参数快照
    outputs_json = db.Column(db.Text, nullable=True)                 # 生成的文件列表
    tool_version = db.Column(db.String(16), nullable=False)
    created_at = db.Column(db.DateTime, nullable=False, default=_utcnow, index=True)

    metrics = db.relationship('MetricRecord', backref='run', lazy=True, cascade="all, delete-orphan",
                              order_by='MetricRecord.id')

    def __repr__(self):
        return f'<运行 {self.id} {self.command}>'

    @property
    def arguments(self) -> Dict[str, Any]:
        return _load_json(self.arguments_json, 'arguments_json', self.id)

    @property
    def input_hashes(self) -> Dict[str, str]:
        return _load_json(self.input_hashes_json, 'input_hashes_json', self.id)

    @property
    def config(self) -> Dict[str, Any]:
        return _load_json(self.config_json, 'config_json', self.id)

    @property
    def outputs(self):
        if not self.outputs_json:
            return []
        try:
            return json.loads(self.outputs_json)
        except json.JSONDecodeError as e:
            logger.error(f"解析运行 {self.id} 的 outputs_json 失败: {e}")
            return []

    def to_dict(self, include_metrics: bool = True):
        data = {
            'id': self.id,
            'command': self.command,
            'arguments': self.arguments,
            'input_hashes': self.input_hashes,
            'config': self.config,
            'outputs': self.outputs,
            'tool_version': self.tool_version,
            'created_at': self.created_at.strftime('%Y-%m-%d %H:%M:%S') if self.created_at else None,
        }
        if include_metrics:
            data['metrics'] = [m.to_dict() for m in self.metrics]
        return data


class MetricRecord(db.Model):
    id = db.Column(db.Integer, primary_key=True)
    run_id = db.Column(db.Integer, db.ForeignKey('run.id'), nullable=False, index=True)
    utterance = db.Column(db.String(255), nullable=False)
    method = db.Column(db.String(32), nullable=True)
    si_snr_db = db.Column(db.Float, nullable=False)
    snr_db = db.Column(db.Float, nullable=False)
    length_samples = db.Column(db.Integer, nullable=False)

    def __repr__(self):
        return f'<指标 {self.utterance} Si-SNR {self.si_snr_db:.2f} dB>'

    def to_dict(self):
        # 与命令行输出的单行记录字段顺序一致
        data = {'utterance': self.utterance}
        if self.method is not None:
            data['method'] = self.method
        data['si_snr_db'] = self.si_snr_db
        data['snr_db'] = self.snr_db
        data['length_samples'] = self.length_samples
        return data
