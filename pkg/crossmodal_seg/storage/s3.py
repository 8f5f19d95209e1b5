""" Store checkpoints in S3 """
import logging
import posixpath
from contextlib import closing
from io import BytesIO

import boto3
from botocore.config import Config
from botocore.exceptions import ClientError
from pyramid.settings import asbool

from crossmodal_seg.exceptions import CheckpointError
from crossmodal_seg.util import get_settings

from .base import ICheckpointStorage

LOG = logging.getLogger(__name__)


class S3Storage(ICheckpointStorage):

    """Storage backend that writes one S3 object per checkpoint file"""

    def __init__(self, bucket=None, bucket_prefix="", **kwargs):
        super(S3Storage, self).__init__(**kwargs)
        self.bucket = bucket
        self.bucket_prefix = bucket_prefix

    @classmethod
    def configure(cls, settings):
        kwargs = super(S3Storage, cls).configure(settings)
        bucket_name = get_settings(settings, "storage.", bucket=str).get("bucket")
        if bucket_name is None:
            raise ValueError("You must specify the 'storage.bucket'")
        kwargs["bucket"] = cls.get_bucket(bucket_name, settings)
        kwargs["bucket_prefix"] = get_settings(settings, "storage.", prefix=str).get(
            "prefix", ""
        )
        return kwargs

    @classmethod
    def get_bucket(cls, bucket_name, settings):
        config_settings = get_settings(
            settings,
            "storage.",
            region_name=str,
            signature_version=str,
            connect_timeout=int,
            read_timeout=int,
        )
        config = Config(**config_settings)
        s3conn = boto3.resource(
            "s3",
            config=config,
            **get_settings(
                settings,
                "storage.",
                region_name=str,
                use_ssl=asbool,
                endpoint_url=str,
                aws_access_key_id=str,
                aws_secret_access_key=str,
                aws_session_token=str,
            )
        )
        bucket = s3conn.Bucket(bucket_name)
        try:
            s3conn.meta.client.head_bucket(Bucket=bucket_name)
        except ClientError as e:
            if e.response["Error"]["Code"] == "404":
                LOG.info("Creating S3 bucket %s", bucket_name)
                if config.region_name:
                    location = {"LocationConstraint": config.region_name}
                    bucket.create(CreateBucketConfiguration=location)
                else:
                    bucket.create()
                bucket.wait_until_exists()
            else:
                raise
        return bucket

    def get_path(self, name, filename=""):
        return posixpath.join(self.bucket_prefix, name, filename)

    def list(self):
        names = set()
        for summary in self.bucket.objects.filter(Prefix=self.bucket_prefix):
            relative = summary.key[len(self.bucket_prefix) :].lstrip("/")
            name, _, filename = relative.partition("/")
            if filename == "manifest.json":
                names.add(name)
        return sorted(names)

    def save(self, name, files):
        ordered = sorted(files, key=lambda f: (f == "manifest.json", f))
        try:
            for filename in ordered:
                self.bucket.put_object(Key=self.get_path(name, filename), Body=files[filename])
        except ClientError as e:
            raise CheckpointError("Could not write checkpoint %s: %s" % (name, e))

    def open(self, name, filename):
        key = self.get_path(name, filename)
        try:
            response = self.bucket.Object(key).get()
        except ClientError as e:
            raise CheckpointError("Could not open s3://%s/%s: %s" % (self.bucket.name, key, e))
        return closing(BytesIO(response["Body"].read()))

    def exists(self, name, filename="manifest.json"):
        key = self.get_path(name, filename)
        return any(obj.key == key for obj in self.bucket.objects.filter(Prefix=key))

    def delete(self, name):
        prefix = self.get_path(name)
        for summary in self.bucket.objects.filter(Prefix=prefix):
            summary.delete()

    def describe(self, name):
        return "s3://%s/%s" % (self.bucket.name, self.get_path(name))
